use std::time::Duration;

use psc_core::driver::{
    ConsistencyResult, ConversionMode, Driver, DriverError, ToleranceResult, ToleranceSpec, WriteAck, CSV_HEADER,
};
use psc_core::psc::{BurstConfig, PscError, ShadowRegisters, TriggerConfig};
use psc_core::sim::{ChannelId, ChannelSetup, SimConfig, Simulation};
use psc_core::supply::{SupplyParams, SupplyState, CMD_ON};

fn driver_with(setup: ChannelSetup, seed: u64) -> (Driver, ChannelId) {
    let mut sim = Simulation::new(SimConfig {
        seed,
        ..SimConfig::default()
    });
    let psc = sim.add_psc();
    let ch = sim.add_channel(psc, setup).unwrap();
    (Driver::new(sim), ch)
}

fn first_order(tau_s: f64, noise_std: f64, mode: ConversionMode) -> ChannelSetup {
    let mut setup = ChannelSetup::loopback(0);
    setup.psi.conversion = mode;
    setup.supply = SupplyParams::FirstOrder {
        tau_s,
        gain: 1.0,
        noise_std,
        initial_state: Some(SupplyState::On),
    };
    setup
}

#[test]
fn loopback_setpoint_reads_back() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    assert_eq!(d.set_setpoint(ch, 1.25).unwrap(), WriteAck::Applied(4096));
    let volts = d.read_volts(ch).unwrap();
    assert_eq!(volts, [1.25, 0.0, 0.0, 0.0]);
    let spec = ToleranceSpec::new(ConversionMode::default().lsb_volts());
    assert_eq!(d.tolerance_check(ch, &spec).unwrap(), ToleranceResult::Ok);
}

#[test]
fn setpoint_out_of_range() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    assert!(matches!(d.set_setpoint(ch, 10.0), Err(DriverError::Range(_))));
    assert_eq!(d.setpoint_volts(ch), None);
    d.set_mode(ch, ConversionMode::unipolar(10.0)).unwrap();
    assert_eq!(d.set_setpoint(ch, 10.0).unwrap(), WriteAck::Applied(65535));
    assert!(matches!(d.set_setpoint(ch, -0.1), Err(DriverError::Range(_))));
}

#[test]
fn tolerance_needs_setpoint() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    d.read(ch).unwrap();
    assert!(matches!(
        d.tolerance_check(ch, &ToleranceSpec::new(0.1)),
        Err(DriverError::NotConfigured(_))
    ));
}

#[test]
fn tolerance_tracks_first_order_settling() {
    let tau = 0.01;
    let (mut d, ch) = driver_with(first_order(tau, 0.0, ConversionMode::unipolar(10.0)), 0);
    d.set_setpoint(ch, 10.0).unwrap();
    d.read(ch).unwrap();
    let spec = ToleranceSpec::new(0.1);
    assert!(matches!(
        d.tolerance_check(ch, &spec).unwrap(),
        ToleranceResult::Alarm { .. }
    ));
    d.sim_mut().advance(Duration::from_secs_f64(5.0 * tau));
    d.read(ch).unwrap();
    assert_eq!(d.tolerance_check(ch, &spec).unwrap(), ToleranceResult::Ok);
}

#[test]
fn alarm_monotone_in_tolerance() {
    let (mut d, ch) = driver_with(first_order(0.002, 0.05, ConversionMode::bipolar(10.0)), 3);
    d.set_setpoint(ch, 2.0).unwrap();
    for i in 0..200 {
        d.read(ch).unwrap();
        for consecutive in [1, 3] {
            let mut prev_alarm = true;
            for t in [0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0] {
                let spec = ToleranceSpec {
                    tolerance_volts: t,
                    consecutive,
                    adc: 0,
                };
                let Ok(result) = d.tolerance_check(ch, &spec) else {
                    continue;
                };
                let alarm = matches!(result, ToleranceResult::Alarm { .. });
                assert!(
                    prev_alarm || !alarm,
                    "read {i}: tolerance {t} alarms but a tighter one did not"
                );
                prev_alarm = alarm;
            }
        }
        d.sim_mut().advance(Duration::from_micros(500));
    }
}

#[test]
fn consecutive_frames_required() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    d.set_setpoint(ch, 1.0).unwrap();
    d.read(ch).unwrap();
    d.read(ch).unwrap();
    d.sim_mut().psi_mut(ch).unwrap();
    d.sim_mut().execute(ch, psc_core::Request::WriteSetpoint(0)).unwrap();
    d.read(ch).unwrap();
    let one = ToleranceSpec::new(0.5);
    let three = ToleranceSpec { consecutive: 3, ..one };
    assert!(matches!(d.tolerance_check(ch, &one).unwrap(), ToleranceResult::Alarm { deviation } if deviation == -1.0));
    assert_eq!(d.tolerance_check(ch, &three).unwrap(), ToleranceResult::Ok);
    d.read(ch).unwrap();
    d.read(ch).unwrap();
    assert!(matches!(
        d.tolerance_check(ch, &three).unwrap(),
        ToleranceResult::Alarm { .. }
    ));
}

#[test]
fn poll_alarms_reports_transitions_once() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    d.set_setpoint(ch, 1.0).unwrap();
    d.set_tolerance(ch, Some(ToleranceSpec::new(0.01))).unwrap();
    d.read(ch).unwrap();
    assert!(d.poll_alarms().is_empty());
    d.sim_mut().execute(ch, psc_core::Request::WriteSetpoint(0)).unwrap();
    d.read(ch).unwrap();
    assert_eq!(d.poll_alarms().len(), 1);
    d.read(ch).unwrap();
    assert!(d.poll_alarms().is_empty());
}

#[test]
fn averaging_examples() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    assert!(matches!(
        d.read_averaged(ch, 1),
        Err(DriverError::InsufficientData { .. })
    ));
    d.set_setpoint(ch, -3.0).unwrap();
    for _ in 0..10 {
        d.read(ch).unwrap();
    }
    let one = d.read_averaged(ch, 1).unwrap();
    assert_eq!(
        one,
        d.frame_volts(ch, d.sim().history(ch).unwrap().newest().unwrap())
            .unwrap()
    );
    assert_eq!(d.read_averaged(ch, 10).unwrap(), one);
    assert!(matches!(
        d.read_averaged(ch, 11),
        Err(DriverError::InsufficientData {
            needed: 11,
            available: 10
        })
    ));
}

#[test]
fn averaging_is_mean_of_raw() {
    let (mut d, ch) = driver_with(first_order(0.001, 0.02, ConversionMode::bipolar(10.0)), 11);
    d.set_setpoint(ch, 0.0).unwrap();
    for _ in 0..32 {
        d.read(ch).unwrap();
    }
    let mode = d.mode(ch).unwrap();
    let raw: Vec<f64> = d
        .sim()
        .read_history(ch, 32)
        .unwrap()
        .iter()
        .map(|f| mode.counts_to_volts(f.adc[0]))
        .collect();
    let mean = raw.iter().sum::<f64>() / 32.0;
    assert!((d.read_averaged(ch, 32).unwrap()[0] - mean).abs() < 1e-12);
}

#[test]
fn averaging_gain_over_seeded_trials() {
    let sigma = 0.010;
    let (mut d, ch) = driver_with(first_order(0.001, sigma, ConversionMode::bipolar(10.0)), 2024);
    d.set_setpoint(ch, 1.0).unwrap();
    d.sim_mut().advance(Duration::from_millis(50));
    let trials: Vec<f64> = (0..1000)
        .map(|_| {
            for _ in 0..64 {
                d.read(ch).unwrap();
            }
            d.read_averaged(ch, 64).unwrap()[0]
        })
        .collect();
    let mean = trials.iter().sum::<f64>() / trials.len() as f64;
    let var = trials.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials.len() - 1) as f64;
    let std = var.sqrt();
    let target = sigma / 8.0;
    assert!((std - target).abs() <= 0.2 * target, "std {std} vs {target}");
}

#[test]
fn shadow_registers_round_trip() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    assert_eq!(d.shadow_registers(ch).unwrap(), ShadowRegisters::default());
    assert_eq!(
        d.fetch_shadow_registers(ch).unwrap(),
        ShadowRegisters {
            last_setpoint: Some(0),
            last_command: Some(0)
        }
    );
    d.sim_mut()
        .execute(ch, psc_core::Request::WriteSetpoint(0x1234))
        .unwrap();
    assert_eq!(d.fetch_shadow_registers(ch).unwrap().last_setpoint, Some(0x1234));
    for _ in 0..100 {
        d.read(ch).unwrap();
    }
    assert_eq!(d.shadow_registers(ch).unwrap().last_setpoint, Some(0x1234));
}

#[test]
fn command_readback_consistency() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    assert!(matches!(
        d.command_readback_check(ch),
        Err(DriverError::Sim(psc_core::SimError::Psc(PscError::NotYetRead)))
    ));
    for word in [0x0001, 0x0155, 0x7FFF] {
        d.send_command(ch, word).unwrap();
        d.fetch_shadow_registers(ch).unwrap();
        assert_eq!(
            d.command_readback_check(ch).unwrap(),
            ConsistencyResult::Ok,
            "{word:#06x}"
        );
    }

    let mut setup = first_order(0.01, 0.0, ConversionMode::default());
    setup.supply = SupplyParams::FirstOrder {
        tau_s: 0.01,
        gain: 1.0,
        noise_std: 0.0,
        initial_state: None,
    };
    let (mut d, ch) = driver_with(setup, 0);
    d.send_command(ch, CMD_ON).unwrap();
    d.fetch_shadow_registers(ch).unwrap();
    assert_eq!(d.command_readback_check(ch).unwrap(), ConsistencyResult::Ok);
    d.sim_mut().inject_supply_fault(ch).unwrap();
    assert!(matches!(
        d.command_readback_check(ch).unwrap(),
        ConsistencyResult::Mismatch { .. }
    ));
}

#[test]
fn history_csv_format() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    let mut empty = Vec::new();
    assert_eq!(d.write_history_csv(ch, &mut empty).unwrap(), 0);
    assert_eq!(String::from_utf8(empty).unwrap(), format!("{CSV_HEADER}\n"));

    d.set_setpoint(ch, 1.25).unwrap();
    for _ in 0..3 {
        d.read(ch).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    assert_eq!(d.save_history(ch, &path).unwrap(), 3);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[3].starts_with("3,"));
    assert!(lines[1].ends_with(",4096,0,0,0,0x8000"), "{}", lines[1]);
    assert!(text.ends_with('\n') && !text.contains('\r'));
    assert_eq!(d.sim().history(ch).unwrap().len(), 3);

    assert!(matches!(
        d.save_history(ch, dir.path().join("missing/x.csv")),
        Err(DriverError::Io(_))
    ));
}

#[test]
fn full_buffer_export() {
    let mut setup = ChannelSetup::loopback(0);
    setup.trigger = TriggerConfig::hardware(10_000.0, 0.0);
    let (mut d, ch) = driver_with(setup, 0);
    d.sim_mut().advance(Duration::from_secs(1));
    let mut out = Vec::new();
    assert_eq!(d.write_history_csv(ch, &mut out).unwrap(), 5458);
}

#[test]
fn burst_configuration_validation() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    assert!(matches!(d.run_burst(ch), Err(DriverError::NotConfigured(_))));
    let ok = BurstConfig {
        rate_hz: 10_000,
        cycles: 100,
    };
    d.configure_burst(ch, ok).unwrap();
    let err = d
        .configure_burst(
            ch,
            BurstConfig {
                rate_hz: 10_001,
                cycles: 100,
            },
        )
        .unwrap_err();
    assert!(matches!(err.psc(), Some(PscError::RateTooHigh(_))));
    assert_eq!(d.burst_config(ch), Some(ok));
    assert_eq!(d.run_burst(ch).unwrap(), 100);
}

#[test]
fn hardware_source_stages_writes() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    d.set_trigger_source(ch, TriggerConfig::hardware(0.0, 0.0)).unwrap();
    assert_eq!(d.set_setpoint(ch, 1.25).unwrap(), WriteAck::Staged(4096));
    d.sim_mut().advance(Duration::from_millis(1));
    assert_eq!(d.sim().psi(ch).unwrap().dac_register(), 0);
    d.sim_mut().trigger_write(ch).unwrap();
    d.sim_mut().advance(Duration::from_millis(1));
    assert_eq!(d.sim().psi(ch).unwrap().dac_register(), 4096);
}

#[test]
fn disabled_channel_rejects_reads() {
    let (mut d, ch) = driver_with(ChannelSetup::loopback(0), 0);
    d.set_enabled(ch, false).unwrap();
    assert!(matches!(d.read(ch).unwrap_err().psc(), Some(PscError::ChannelDisabled)));
    d.set_enabled(ch, true).unwrap();
    d.read(ch).unwrap();
}
