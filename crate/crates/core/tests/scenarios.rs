use std::path::{Path, PathBuf};

use fdmimo::linalg::CMatrix;
use fdmimo::linkbudget::{
    capacity, sinr_reference, DuplexMode, EvalOptions, NoiseConfig, TransmitPowers,
};
use fdmimo::precoder::{search_partition, PartitionConstraint};
use fdmimo::scenario::{
    build_scenario, evaluate_scenario, load_config, partition_table, ScenarioConfig,
};
use fdmimo::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn example(name: &str) -> (ScenarioConfig, PathBuf) {
    load_config(&crate_dir().join("examples").join(name)).unwrap()
}

#[test]
fn bundled_examples_round_trip_through_toml() {
    for name in [
        "isotropic_2x2.cfg",
        "synthetic_4up4down.cfg",
        "reference_8up8down.cfg",
    ] {
        let (cfg, _) = example(name);
        let again = ScenarioConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
}

#[test]
fn bundled_examples_evaluate() {
    for name in [
        "isotropic_2x2.cfg",
        "synthetic_4up4down.cfg",
        "reference_8up8down.cfg",
    ] {
        let (cfg, base) = example(name);
        let report = evaluate_scenario(&build_scenario(&cfg, &base).unwrap()).unwrap();
        let link = &report.link;
        for figures in [
            &link.precoded,
            &link.reference,
            &link.full_ideal,
            &link.half_duplex,
        ] {
            assert!(
                figures.sum_capacity().is_finite() && figures.sum_capacity() > 0.0,
                "{name}"
            );
        }
        assert!(
            link.full_ideal.up.sinr >= link.reference.up.sinr * (1.0 - 1e-12),
            "{name}"
        );
    }
}

#[test]
fn measured_pattern_files_drive_the_channel() {
    let text = r#"
[carrier]
frequency_hz = 3.5e9

[array]
m_x = 2
m_y = 1
spacing_x = 0.5
spacing_y = 0.5

[patterns]
kind = "files"
uplink = ["dipole_10deg.csv"]
downlink = ["dipole_10deg.csv"]

[coupling]
kind = "synthetic"
c0 = 0.2
alpha = 1.0

[elements]
uplink = [1]
downlink = [2]

[users]
uplink = [{ theta_deg = 90.0, phi_deg = 0.0, distance_m = 100.0 }]
downlink = [{ theta_deg = 90.0, phi_deg = 90.0, distance_m = 100.0 }]

[powers]
p_up_w = 0.2
p_down_w = 1.0e-4

[noise]
p_n_w = 8.0e-14
k_dyn = 1.0e-5
"#;
    let cfg = ScenarioConfig::parse(text).unwrap();
    let scenario = build_scenario(&cfg, &crate_dir().join("fixtures")).unwrap();
    // broadside of a z-dipole: G = 1.5
    let lambda = scenario.wavelength_m;
    let expected = 1.5f64.sqrt() * lambda / (4.0 * std::f64::consts::PI * 100.0);
    let h = scenario.inputs.h_up[(0, 0)].norm();
    assert!((h - expected).abs() / expected < 1e-3, "{h} vs {expected}");
}

fn random_synthetic(rng: &mut ChaCha8Rng) -> ScenarioConfig {
    let user = |rng: &mut ChaCha8Rng| {
        format!(
            "{{ theta_deg = {}, phi_deg = {}, distance_m = {} }}",
            rng.random_range(20.0..160.0),
            rng.random_range(0.0..360.0),
            rng.random_range(50.0..500.0)
        )
    };
    let text = format!(
        r#"
[carrier]
frequency_hz = 3.5e9
[array]
m_x = 3
m_y = 2
spacing_x = {sx}
spacing_y = {sy}
[patterns]
kind = "dipole"
n_theta = 19
n_phi = 36
[coupling]
kind = "synthetic"
c0 = 0.15
alpha = 1.0
[elements]
uplink = [1, 2, 3]
downlink = [4, 5, 6]
[users]
uplink = [{u1}, {u2}]
downlink = [{d1}, {d2}]
[powers]
p_up_w = 0.2
p_down_w = {pd}
[noise]
p_n_w = 8.0e-14
k_dyn = 1.0e-5
"#,
        sx = rng.random_range(0.3..1.0),
        sy = rng.random_range(0.3..1.0),
        u1 = user(rng),
        u2 = user(rng),
        d1 = user(rng),
        d2 = user(rng),
        pd = 10f64.powf(rng.random_range(-5.0..0.0)),
    );
    ScenarioConfig::parse(&text).unwrap()
}

#[test]
fn best_partition_never_loses_to_the_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let cfg = random_synthetic(&mut rng);
        let scenario = build_scenario(&cfg, Path::new(".")).unwrap();
        let table = partition_table(&scenario).unwrap();
        assert_eq!(table.rows.len(), 9);
        let slack = 1e-9 * table.reference_sum_capacity;
        assert!(
            table.best().sum_capacity >= table.reference_sum_capacity - slack,
            "trial {trial}: best {} < reference {}",
            table.best().sum_capacity,
            table.reference_sum_capacity
        );
        let i = &scenario.inputs;
        let (ref_up, _) = sinr_reference(
            &i.h_up,
            &i.h_down,
            &i.h_self,
            &i.powers,
            &i.noise,
            &EvalOptions::default(),
        );
        let best_up = table.rows.iter().map(|r| r.sinr_up).fold(0.0, f64::max);
        assert!(
            best_up >= ref_up * (1.0 - 1e-9),
            "trial {trial}: {best_up} < {ref_up}"
        );
        let full = table
            .rows
            .iter()
            .find(|r| r.n_up == 3 && r.n_down == 3)
            .unwrap();
        let ref_sum = capacity(ref_up, DuplexMode::Full);
        assert!(
            (full.capacity_up - ref_sum).abs() <= 1e-9 * ref_sum.max(1.0),
            "trial {trial}"
        );
    }
}

fn random_channel(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
    })
}

#[test]
fn zero_coupling_keeps_every_transmit_antenna() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let powers = TransmitPowers::new(0.2, 1.0).unwrap();
    let noise = NoiseConfig::new(1e-13, 1e-5).unwrap();
    for (m_up, m_down) in [(1, 4), (3, 3), (4, 2)] {
        let h_self = CMatrix::zeros(m_up, m_down);
        let h_up = random_channel(&mut rng, m_up, 2, 1e-5);
        let h_down = random_channel(&mut rng, 2, m_down, 1e-5);
        let rows = search_partition(
            &h_self,
            &h_up,
            &h_down,
            &powers,
            &noise,
            &PartitionConstraint::default(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), m_up * m_down);
        assert_eq!(rows[0].n_down, m_down, "{m_up}x{m_down}");
        if m_up == 1 {
            assert_eq!((rows[0].n_up, rows[0].n_down), (1, m_down));
        }
    }
}

#[test]
fn constraints_limit_the_table() {
    let (mut cfg, base) = example("reference_8up8down.cfg");
    cfg.partition.max_total = Some(6);
    let table = partition_table(&build_scenario(&cfg, &base).unwrap()).unwrap();
    assert!(table.rows.iter().all(|r| r.n_up + r.n_down <= 6));
    assert_eq!(table.rows.len(), (1..=5).sum::<usize>());
}
