//! Network front end.
//!
//! A single scheduler thread owns the simulation. Text sessions and event
//! sockets send it jobs over one queue and wait for the reply, so commands
//! from all clients are applied in arrival order between simulation slices.

use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::events::{Control, Event, EventHub};
use crate::host::Host;
use crate::protocol::execute_command;

/// Pace of the old serial checkout port.
pub const SERIAL_RATE_HZ: f64 = 15.0;

/// Virtual time advanced per scheduler pass in fast mode.
const FAST_SLICE: Duration = Duration::from_millis(5);
/// Wall time between scheduler passes in realtime mode.
const REALTIME_TICK: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Run as fast as the host allows.
    Fast,
    /// Virtual seconds per wall second.
    Realtime(f64),
    /// Time moves only when a command (such as `WAIT`) moves it.
    Manual,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub http_addr: SocketAddr,
    /// Text protocol address; defaults to the HTTP port plus one.
    pub text_addr: Option<SocketAddr>,
    pub pacing: Pacing,
    pub serial_rate_limit: bool,
    pub event_capacity: usize,
}

impl ServerConfig {
    pub fn new(http_addr: SocketAddr) -> Self {
        Self {
            http_addr,
            text_addr: None,
            pacing: Pacing::Realtime(1.0),
            serial_rate_limit: false,
            event_capacity: crate::events::DEFAULT_CAPACITY,
        }
    }

    fn text_addr(&self) -> SocketAddr {
        self.text_addr.unwrap_or_else(|| {
            let mut addr = self.http_addr;
            if addr.port() != 0 {
                addr.set_port(addr.port() + 1);
            }
            addr
        })
    }
}

pub enum Job {
    Command {
        line: String,
        reply: oneshot::Sender<String>,
    },
    Snapshot {
        reply: oneshot::Sender<String>,
    },
}

/// Handle for submitting work to the scheduler thread.
#[derive(Clone)]
pub struct Scheduler {
    jobs: mpsc::Sender<Job>,
}

impl Scheduler {
    /// Moves `host` onto a dedicated thread and starts pacing it.
    pub fn spawn(mut host: Host, pacing: Pacing, hub: EventHub) -> (Self, thread::JoinHandle<Host>) {
        let (tx, rx) = mpsc::channel();
        host.set_event_capture(true);
        let handle = thread::Builder::new()
            .name("psc-scheduler".into())
            .spawn(move || run_scheduler(host, pacing, hub, rx))
            .expect("spawn scheduler thread");
        (Self { jobs: tx }, handle)
    }

    pub async fn command(&self, line: String) -> Option<String> {
        let (reply, rx) = oneshot::channel();
        self.jobs.send(Job::Command { line, reply }).ok()?;
        rx.await.ok()
    }

    pub async fn snapshot(&self) -> Option<String> {
        let (reply, rx) = oneshot::channel();
        self.jobs.send(Job::Snapshot { reply }).ok()?;
        rx.await.ok()
    }
}

fn run_scheduler(mut host: Host, pacing: Pacing, hub: EventHub, jobs: mpsc::Receiver<Job>) -> Host {
    let mut wall_origin = Instant::now();
    let mut virtual_origin = host.sim().now();
    loop {
        let wait = match pacing {
            Pacing::Fast => Duration::ZERO,
            Pacing::Realtime(_) => REALTIME_TICK,
            Pacing::Manual => Duration::from_secs(3600),
        };
        let first = match jobs.recv_timeout(wait) {
            Ok(job) => Some(job),
            Err(mpsc::RecvTimeoutError::Timeout) => None,
            Err(mpsc::RecvTimeoutError::Disconnected) => return host,
        };
        for job in first.into_iter().chain(std::iter::from_fn(|| jobs.try_recv().ok())) {
            match job {
                Job::Command { line, reply } => {
                    let response = execute_command(&mut host, &line);
                    publish(&mut host, &hub);
                    let _ = reply.send(response);
                }
                Job::Snapshot { reply } => {
                    publish(&mut host, &hub);
                    let _ = reply.send(host.snapshot().to_json());
                }
            }
        }
        match pacing {
            Pacing::Fast => host.sim_mut().advance(FAST_SLICE),
            Pacing::Realtime(scale) => {
                let target = virtual_origin + wall_origin.elapsed().mul_f64(scale);
                let now = host.sim().now();
                if target > now {
                    host.sim_mut().run_until(target);
                } else if now > target {
                    // A command ran the clock ahead; let wall time catch up
                    // from here rather than stalling.
                    wall_origin = Instant::now();
                    virtual_origin = now;
                }
            }
            Pacing::Manual => {}
        }
        publish(&mut host, &hub);
    }
}

fn publish(host: &mut Host, hub: &EventHub) {
    for event in host.collect_events() {
        hub.publish(&event);
    }
}

#[derive(Clone)]
struct AppState {
    scheduler: Scheduler,
    hub: EventHub,
}

pub struct RunningServer {
    pub http_addr: SocketAddr,
    pub text_addr: SocketAddr,
    pub scheduler: Scheduler,
    pub hub: EventHub,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn shutdown(self) {
        for task in self.tasks {
            task.abort();
        }
    }
}

/// Binds both listeners and starts serving in the background.
pub async fn start(config: ServerConfig, host: Host) -> std::io::Result<RunningServer> {
    let http = TcpListener::bind(config.http_addr).await?;
    let text = TcpListener::bind(config.text_addr()).await?;
    let http_addr = http.local_addr()?;
    let text_addr = text.local_addr()?;

    let hub = EventHub::new(config.event_capacity);
    let (scheduler, _thread) = Scheduler::spawn(host, config.pacing, hub.clone());
    let state = AppState {
        scheduler: scheduler.clone(),
        hub: hub.clone(),
    };
    let app = Router::new().route("/events", get(events_socket)).with_state(state);
    let http_task = tokio::spawn(async move {
        if let Err(e) = axum::serve(http, app).await {
            tracing::error!("http server stopped: {e}");
        }
    });
    let text_task = tokio::spawn(serve_text(text, scheduler.clone(), config.serial_rate_limit));
    tracing::info!(%http_addr, %text_addr, "listening");
    Ok(RunningServer {
        http_addr,
        text_addr,
        scheduler,
        hub,
        tasks: vec![http_task, text_task],
    })
}

async fn serve_text(listener: TcpListener, scheduler: Scheduler, rate_limit: bool) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                tracing::debug!(%peer, "text session opened");
                tokio::spawn(text_session(stream, scheduler.clone(), rate_limit));
            }
            Err(e) => tracing::warn!("accept failed: {e}"),
        }
    }
}

async fn text_session(stream: TcpStream, scheduler: Scheduler, rate_limit: bool) {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let spacing = Duration::from_secs_f64(1.0 / SERIAL_RATE_HZ);
    let mut next_slot = tokio::time::Instant::now();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        if rate_limit {
            tokio::time::sleep_until(next_slot).await;
            next_slot = tokio::time::Instant::now() + spacing;
        }
        let Some(mut response) = scheduler.command(line).await else {
            break;
        };
        response.push('\n');
        if write.write_all(response.as_bytes()).await.is_err() {
            break;
        }
    }
}

async fn events_socket(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| event_session(socket, state))
}

async fn event_session(mut socket: WebSocket, state: AppState) {
    // Subscribe before the snapshot so nothing between the two is lost.
    let mut events = state.hub.subscribe();
    let Some(snapshot) = state.scheduler.snapshot().await else {
        return;
    };
    if socket.send(Message::Text(snapshot.into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            event = events.next() => {
                let Some(text) = event else { break };
                if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(text))) => text,
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                    Some(Ok(_)) => continue,
                };
                let reply = control(&state.scheduler, text.as_str()).await;
                // Events caused by the command were published before the
                // reply came back; deliver them first.
                while let Some(event) = events.try_next() {
                    if socket.send(Message::Text(event.as_ref().into())).await.is_err() {
                        return;
                    }
                }
                if socket.send(Message::Text(reply.to_json().into())).await.is_err() {
                    break;
                }
            }
        }
    }
}

async fn control(scheduler: &Scheduler, text: &str) -> Event {
    match serde_json::from_str::<Control>(text) {
        Ok(Control { id, cmd }) => {
            let text = scheduler
                .command(cmd)
                .await
                .unwrap_or_else(|| "ERR INTERNAL scheduler stopped".into());
            Event::Response {
                id,
                ok: text.starts_with("OK"),
                text,
            }
        }
        Err(e) => Event::Response {
            id: None,
            ok: false,
            text: format!("ERR SYNTAX control message: {e}"),
        },
    }
}
