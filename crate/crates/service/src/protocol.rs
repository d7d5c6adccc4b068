//! Line-oriented operator protocol.
//!
//! One command per line, whitespace separated, verbs case-insensitive.
//! Every command gets exactly one response starting with `OK` or
//! `ERR <code>`. `HIST` is the only multi-line response: `OK <n>` followed
//! by `n` frame lines.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Duration;

use psc_core::driver::{ConsistencyResult, ConversionMode, DriverError, ToleranceResult, ToleranceSpec, WriteAck};
use psc_core::link::{FaultConfig, FaultDirection};
use psc_core::psc::{BurstConfig, ExchangeFailure, PscError, TriggerConfig};
use psc_core::sim::{ChannelId, SimError};
use psc_core::supply::{CMD_OFF, CMD_ON, CMD_RESET, CMD_STANDBY};

use crate::events::AlarmKind;
use crate::host::{Host, HostError};

pub const VERBS: &[&str] = &[
    "SET",
    "CMD",
    "READ",
    "HIST",
    "BURST",
    "STATUS",
    "ENABLE",
    "DISABLE",
    "FREEZE",
    "UNFREEZE",
    "CLEAR",
    "CAL",
    "SAVE",
    "AVG",
    "MODE",
    "TRIG",
    "WTRIG",
    "SHADOW",
    "TOL",
    "CHECK",
    "CONSIST",
    "FAULT",
    "LINKFAULT",
    "WAIT",
    "TIME",
    "HELP",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub code: &'static str,
    pub message: String,
}

impl ProtocolError {
    fn new(code: &'static str, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    fn syntax(message: impl ToString) -> Self {
        Self::new("SYNTAX", message)
    }
}

impl From<HostError> for ProtocolError {
    fn from(e: HostError) -> Self {
        Self::new("NOCHAN", e)
    }
}

impl From<SimError> for ProtocolError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Psc(p) => p.into(),
            SimError::NoSuchChannel(_) | SimError::NoSuchPsc(_) => Self::new("NOCHAN", e),
            SimError::Link(_) | SimError::Supply(_) | SimError::RoundTrip { .. } => Self::new("CONFIG", e),
            _ => Self::new("INTERNAL", e),
        }
    }
}

impl From<PscError> for ProtocolError {
    fn from(e: PscError) -> Self {
        let code = match e {
            PscError::RateTooHigh(_) => "RATE",
            PscError::InvalidRate(_) | PscError::NoCycles => "ARG",
            PscError::ChannelDisabled => "DISABLED",
            PscError::BufferFrozen => "FROZEN",
            PscError::BurstInProgress | PscError::Busy => "BUSY",
            PscError::NotYetRead => "NOTREAD",
        };
        Self::new(code, e)
    }
}

impl From<DriverError> for ProtocolError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Sim(s) => s.into(),
            DriverError::Range(_) => Self::new("RANGE", e),
            DriverError::Exchange(ExchangeFailure::Echoed | ExchangeFailure::CorruptReply) => Self::new("CKSUM", e),
            DriverError::Exchange(ExchangeFailure::Disabled) => Self::new("DISABLED", e),
            DriverError::Exchange(_) => Self::new("LINK", e),
            DriverError::NotConfigured(_) => Self::new("CONFIG", e),
            DriverError::InsufficientData { .. } => Self::new("NODATA", e),
            DriverError::InvalidTolerance(_) => Self::new("ARG", e),
            DriverError::Io(_) => Self::new("IO", e),
            DriverError::Unexpected(_) => Self::new("INTERNAL", e),
        }
    }
}

type Reply = Result<String, ProtocolError>;

/// Runs one command line and returns the response (without a trailing
/// newline).
pub fn execute_command(host: &mut Host, line: &str) -> String {
    match dispatch(host, line) {
        Ok(body) if body.is_empty() => "OK".to_owned(),
        Ok(body) => format!("OK {body}"),
        Err(e) => format!("ERR {} {}", e.code, e.message),
    }
}

struct Args<'a> {
    verb: String,
    rest: Vec<&'a str>,
}

impl<'a> Args<'a> {
    fn arity(&self, min: usize, max: usize, usage: &str) -> Result<(), ProtocolError> {
        if (min..=max).contains(&self.rest.len()) {
            Ok(())
        } else {
            Err(ProtocolError::syntax(format!("usage: {} {usage}", self.verb)))
        }
    }

    fn parse<T: FromStr>(&self, i: usize, what: &str) -> Result<T, ProtocolError> {
        let raw = self.rest[i];
        raw.parse()
            .map_err(|_| ProtocolError::syntax(format!("bad {what} {raw:?}")))
    }

    fn channel(&self, host: &Host) -> Result<ChannelId, ProtocolError> {
        let psc = self.parse(0, "controller id")?;
        let channel = self.parse(1, "channel")?;
        Ok(host.channel(psc, channel)?)
    }
}

fn dispatch(host: &mut Host, line: &str) -> Reply {
    let mut tokens = line.split_whitespace();
    let Some(verb) = tokens.next() else {
        return Err(ProtocolError::syntax("empty command"));
    };
    let args = Args {
        verb: verb.to_ascii_uppercase(),
        rest: tokens.collect(),
    };
    match args.verb.as_str() {
        "SET" => {
            args.arity(3, 3, "<psc> <ch> <volts>")?;
            let ch = args.channel(host)?;
            let volts: f64 = args.parse(2, "voltage")?;
            if !volts.is_finite() {
                return Err(ProtocolError::new("RANGE", format!("{volts} is not a voltage")));
            }
            Ok(match host.driver_mut().set_setpoint(ch, volts)? {
                WriteAck::Applied(w) => w.to_string(),
                WriteAck::Staged(w) => format!("{w} staged"),
            })
        }
        "CMD" => {
            args.arity(3, 3, "<psc> <ch> ON|OFF|STANDBY|RESET|<word>")?;
            let ch = args.channel(host)?;
            let word = parse_command_word(args.rest[2])?;
            Ok(match host.driver_mut().send_command(ch, word)? {
                WriteAck::Applied(w) => format!("0x{w:04X}"),
                WriteAck::Staged(w) => format!("0x{w:04X} staged"),
            })
        }
        "READ" => {
            args.arity(2, 2, "<psc> <ch>")?;
            let ch = args.channel(host)?;
            let frame = host.driver_mut().read(ch)?;
            let volts = host.driver().frame_volts(ch, &frame)?;
            Ok(format!("{} 0x{:04X}", fmt_volts(&volts), frame.status))
        }
        "HIST" => {
            args.arity(3, 3, "<psc> <ch> <n>")?;
            let ch = args.channel(host)?;
            let n: usize = args.parse(2, "count")?;
            let frames = host.sim().read_history(ch, n)?;
            let mut out = frames.len().to_string();
            for f in &frames {
                let volts = host.driver().frame_volts(ch, f)?;
                write!(
                    out,
                    "\n{} {} {} 0x{:04X}",
                    f.seq,
                    f.timestamp_us,
                    fmt_volts(&volts),
                    f.status
                )
                .unwrap();
            }
            Ok(out)
        }
        "BURST" => {
            args.arity(4, 4, "<psc> <ch> <rate_hz> <cycles>")?;
            let ch = args.channel(host)?;
            let config = BurstConfig {
                rate_hz: args.parse(2, "rate")?,
                cycles: args.parse(3, "cycle count")?,
            };
            host.driver_mut().configure_burst(ch, config)?;
            let captured = host.driver_mut().run_burst(ch)?;
            Ok(captured.to_string())
        }
        "STATUS" => {
            args.arity(2, 2, "<psc> <ch>")?;
            let ch = args.channel(host)?;
            let s = host.sim().channel_status(ch)?;
            Ok(format!(
                "link={} cksum={} disabled={}",
                u8::from(s.link_error),
                u8::from(s.checksum_error),
                u8::from(s.disabled)
            ))
        }
        "ENABLE" | "DISABLE" | "FREEZE" | "UNFREEZE" | "CLEAR" | "CAL" | "FAULT" => {
            args.arity(2, 2, "<psc> <ch>")?;
            let ch = args.channel(host)?;
            let driver = host.driver_mut();
            match args.verb.as_str() {
                "ENABLE" => driver.set_enabled(ch, true)?,
                "DISABLE" => driver.set_enabled(ch, false)?,
                "FREEZE" => driver.freeze(ch)?,
                "UNFREEZE" => driver.unfreeze(ch)?,
                "CLEAR" => driver.clear_errors(ch)?,
                "CAL" => driver.recalibrate(ch)?,
                _ => driver.sim_mut().inject_supply_fault(ch)?,
            }
            Ok(String::new())
        }
        "SAVE" => {
            args.arity(3, 3, "<psc> <ch> <path>")?;
            let ch = args.channel(host)?;
            Ok(host.driver().save_history(ch, args.rest[2])?.to_string())
        }
        "AVG" => {
            args.arity(3, 3, "<psc> <ch> <n>")?;
            let ch = args.channel(host)?;
            let n: usize = args.parse(2, "count")?;
            Ok(fmt_volts(&host.driver().read_averaged(ch, n)?))
        }
        "MODE" => {
            args.arity(3, 4, "<psc> <ch> UNI|BI [full_scale_volts]")?;
            let ch = args.channel(host)?;
            let fs = match args.rest.get(3) {
                Some(_) => args.parse(3, "full scale")?,
                None => host.driver().mode(ch)?.full_scale_volts,
            };
            if !(fs > 0.0 && f64::is_finite(fs)) {
                return Err(ProtocolError::new("RANGE", format!("full scale {fs} must be positive")));
            }
            let mode = match args.rest[2].to_ascii_uppercase().as_str() {
                "UNI" => ConversionMode::unipolar(fs),
                "BI" => ConversionMode::bipolar(fs),
                other => return Err(ProtocolError::syntax(format!("mode must be UNI or BI, got {other}"))),
            };
            host.driver_mut().set_mode(ch, mode)?;
            Ok(String::new())
        }
        "TRIG" => {
            args.arity(3, 6, "<psc> <ch> SW | HW <read_hz> <write_hz> [write_offset_us]")?;
            let ch = args.channel(host)?;
            let trigger = match args.rest[2].to_ascii_uppercase().as_str() {
                "SW" if args.rest.len() == 3 => TriggerConfig::software(),
                "HW" if args.rest.len() >= 5 => TriggerConfig {
                    write_offset_us: match args.rest.get(5) {
                        Some(_) => args.parse(5, "offset")?,
                        None => 0.0,
                    },
                    ..TriggerConfig::hardware(args.parse(3, "read rate")?, args.parse(4, "write rate")?)
                },
                _ => {
                    return Err(ProtocolError::syntax(
                        "usage: TRIG <psc> <ch> SW | HW <read_hz> <write_hz> [write_offset_us]",
                    ))
                }
            };
            host.driver_mut().set_trigger_source(ch, trigger)?;
            Ok(String::new())
        }
        "WTRIG" => {
            args.arity(2, 2, "<psc> <ch>")?;
            let ch = args.channel(host)?;
            let sent = host.sim_mut().trigger_write(ch)?;
            Ok(sent.len().to_string())
        }
        "SHADOW" => {
            args.arity(2, 2, "<psc> <ch>")?;
            let ch = args.channel(host)?;
            let regs = host.driver_mut().fetch_shadow_registers(ch)?;
            Ok(format!(
                "setpoint=0x{:04X} command=0x{:04X}",
                regs.last_setpoint.unwrap_or_default(),
                regs.last_command.unwrap_or_default()
            ))
        }
        "TOL" => {
            args.arity(3, 4, "<psc> <ch> <volts> [consecutive] | <psc> <ch> OFF")?;
            let ch = args.channel(host)?;
            let spec = if args.rest[2].eq_ignore_ascii_case("OFF") {
                None
            } else {
                Some(tolerance_spec(&args, 2)?)
            };
            host.driver_mut().set_tolerance(ch, spec)?;
            Ok(String::new())
        }
        "CHECK" => {
            args.arity(2, 4, "<psc> <ch> [volts [consecutive]]")?;
            let ch = args.channel(host)?;
            let spec = if args.rest.len() > 2 {
                tolerance_spec(&args, 2)?
            } else {
                host.driver()
                    .tolerance(ch)
                    .ok_or_else(|| ProtocolError::new("CONFIG", "no tolerance set (TOL or pass one)"))?
            };
            Ok(match host.driver().tolerance_check(ch, &spec)? {
                ToleranceResult::Ok => "ok".to_owned(),
                ToleranceResult::Alarm { deviation } => format!("alarm {deviation:+.6}"),
            })
        }
        "CONSIST" => {
            args.arity(2, 2, "<psc> <ch>")?;
            let ch = args.channel(host)?;
            host.driver_mut().fetch_shadow_registers(ch)?;
            Ok(match host.driver_mut().command_readback_check(ch)? {
                ConsistencyResult::Ok => "ok".to_owned(),
                ConsistencyResult::Mismatch {
                    expected_status,
                    actual_status,
                } => {
                    let text = format!("mismatch expected=0x{expected_status:04X} actual=0x{actual_status:04X}");
                    host.push_alarm(ch, AlarmKind::Consistency, text.clone());
                    text
                }
            })
        }
        "LINKFAULT" => {
            args.arity(4, 5, "<psc> <ch> <corrupt_prob> <drop_prob> [both|down|up]")?;
            let ch = args.channel(host)?;
            let direction = match args.rest.get(4).map(|s| s.to_ascii_lowercase()) {
                None => FaultDirection::Both,
                Some(d) if d == "both" => FaultDirection::Both,
                Some(d) if d == "down" => FaultDirection::Downlink,
                Some(d) if d == "up" => FaultDirection::Uplink,
                Some(d) => {
                    return Err(ProtocolError::syntax(format!(
                        "direction must be both, down or up, got {d}"
                    )))
                }
            };
            let faults = FaultConfig {
                corrupt_prob: args.parse(2, "probability")?,
                drop_prob: args.parse(3, "probability")?,
                seed: None,
                direction,
            };
            host.sim_mut()
                .set_link_faults(ch, faults)
                .map_err(|e| ProtocolError::new("ARG", e))?;
            Ok(String::new())
        }
        "WAIT" => {
            args.arity(1, 1, "<seconds>")?;
            let secs: f64 = args.parse(0, "duration")?;
            if !(secs.is_finite() && secs >= 0.0) {
                return Err(ProtocolError::new("ARG", format!("cannot wait {secs} s")));
            }
            host.sim_mut().advance(Duration::from_secs_f64(secs));
            Ok(format!("{:.6}", host.sim().now().as_secs_f64()))
        }
        "TIME" => {
            args.arity(0, 0, "")?;
            Ok(format!("{:.6}", host.sim().now().as_secs_f64()))
        }
        "HELP" => Ok(VERBS.join(" ")),
        other => Err(ProtocolError::syntax(format!("unknown verb {other}"))),
    }
}

fn tolerance_spec(args: &Args<'_>, at: usize) -> Result<ToleranceSpec, ProtocolError> {
    let mut spec = ToleranceSpec::new(args.parse(at, "tolerance")?);
    if args.rest.len() > at + 1 {
        spec.consecutive = args.parse(at + 1, "consecutive count")?;
    }
    spec.validate()?;
    Ok(spec)
}

fn parse_command_word(raw: &str) -> Result<u16, ProtocolError> {
    let word = match raw.to_ascii_uppercase().as_str() {
        "ON" => CMD_ON,
        "OFF" => CMD_OFF,
        "STANDBY" => CMD_STANDBY,
        "RESET" => CMD_RESET,
        s => {
            let parsed = match s.strip_prefix("0X") {
                Some(hex) => u16::from_str_radix(hex, 16),
                None => s.parse(),
            };
            parsed.map_err(|_| ProtocolError::syntax(format!("bad command {raw:?}")))?
        }
    };
    Ok(word)
}

fn fmt_volts(v: &[f64; 4]) -> String {
    format!("{:.6} {:.6} {:.6} {:.6}", v[0], v[1], v[2], v[3])
}
