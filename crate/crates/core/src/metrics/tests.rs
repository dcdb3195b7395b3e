use super::*;
use crate::oracle::{retrained_reference, OracleDenoiser};

fn split() -> SplitDataset<f64> {
    SplitDataset::new(
        Tensor2::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap(),
        Tensor2::from_rows(&[[0.8, 0.8]]).unwrap(),
    )
    .unwrap()
}

fn report(freqs: Vec<f64>, n: usize) -> MetricsReport {
    MetricsReport {
        config_hash: "h".into(),
        method: "m".into(),
        step: 0,
        seed: 0,
        frequency: freqs[0],
        nll_unlearn: 0.0,
        nll_remain: 0.0,
        recon_similarity: 0.0,
        oracle_distance: 0.0,
        n_samples: n,
        mode_frequencies: freqs,
        unassigned: 0.0,
    }
}

#[test]
fn assignment_rules() {
    let modes = ModeSpec::new(vec![vec![0.0, 0.0], vec![2.0, 0.0]], Some(0.5)).unwrap();
    assert_eq!(modes.assign(&[0.1, 0.1]), Some(0));
    assert_eq!(modes.assign(&[1.8, 0.2]), Some(1));
    assert_eq!(modes.assign(&[1.0, 0.0]), None);
    let open = ModeSpec::new(modes.centers.clone(), None).unwrap();
    assert_eq!(open.assign(&[1.0, 0.0]), Some(0));
    assert!(ModeSpec::new(vec![vec![0.0], vec![0.0]], None).is_err());
    assert!(ModeSpec::new(vec![vec![0.0], vec![1.0, 2.0]], None).is_err());
    assert!(ModeSpec::new(vec![vec![0.0]], Some(0.0)).is_err());
}

#[test]
fn histogram_frequencies_sum_to_one() {
    let modes = ModeSpec::new(vec![vec![0.0], vec![1.0]], Some(0.2)).unwrap();
    let samples = Tensor2::from_rows(&[[0.05], [0.9], [1.1], [0.5], [-0.1]]).unwrap();
    let counts = mode_histogram(&samples, &modes).unwrap();
    assert_eq!(counts.counts, vec![2, 2]);
    assert_eq!(counts.unassigned, 1);
    let total: f64 = counts.frequencies().iter().sum::<f64>() + counts.unassigned_frequency();
    assert!((total - 1.0).abs() < 1e-15);
    let empty = ModeCounts { counts: vec![0, 0], unassigned: 0 };
    assert_eq!(empty.frequency(0), 0.0);
    assert!(mode_histogram(&Tensor2::<f64>::zeros(1, 2), &modes).is_err());
}

#[test]
fn oracle_sample_frequencies_match_the_weights() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rows = vec![[-1.0]; 99];
    rows.push([1.0]);
    let oracle = OracleDenoiser::new(Tensor2::from_rows(&rows).unwrap(), s.clone()).unwrap();
    let modes = ModeSpec::new(vec![vec![-1.0], vec![1.0]], Some(0.3)).unwrap();
    let n = 10_000;
    let rng = RngStream::new(40, 0);
    let f = mode_frequency(&oracle, &s, &modes, n, &rng, 1).unwrap();
    let se = stats::proportion_se(0.01, n);
    assert!((f - 0.01).abs() < 3.0 * se, "{f} (se {se})");
    assert_eq!(mode_frequency(&oracle, &s, &modes, 0, &rng, 1).unwrap(), 0.0);
    assert!(mode_frequency(&oracle, &s, &modes, 10, &rng, 2).is_err());
}

#[test]
fn paired_nll_is_antisymmetric_and_zero_on_itself() {
    let s = NoiseSchedule::linear(20).unwrap();
    let data = split();
    let full = OracleDenoiser::new(data.full(), s.clone()).unwrap();
    let reference = retrained_reference(&data, &s).unwrap();
    let rng = RngStream::new(41, 0);
    let same = paired_nll(&full, &full, &s, &data.full(), &rng, 16).unwrap();
    assert!(same.iter().all(|p| p.difference() == 0.0));
    let ab = paired_nll(&full, &reference, &s, data.forget(), &rng, 16).unwrap();
    let ba = paired_nll(&reference, &full, &s, data.forget(), &rng, 16).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert_eq!(x.difference(), -y.difference());
    }
}

#[test]
fn forgotten_point_is_less_likely_without_it() {
    let s = NoiseSchedule::linear(20).unwrap();
    let data = split();
    let full = OracleDenoiser::new(data.full(), s.clone()).unwrap();
    let reference = retrained_reference(&data, &s).unwrap();
    let rng = RngStream::new(42, 0);
    let pairs = paired_nll(&full, &reference, &s, data.forget(), &rng, 64).unwrap();
    assert!(pairs[0].a < pairs[0].b, "{:?}", pairs[0]);
    let remain_full = mean_nll(&full, &s, data.remain(), &rng, 64).unwrap();
    assert!(remain_full.is_finite());
}

#[test]
fn centered_cosine_examples() {
    let c = [1.0, 1.0];
    assert!((centered_cosine(&[2.0, 1.0], &[3.0, 1.0], &c) - 1.0).abs() < 1e-15);
    assert!((centered_cosine(&[2.0, 1.0], &[1.0, 2.0], &c)).abs() < 1e-15);
    assert!((centered_cosine(&[2.0, 1.0], &[0.0, 1.0], &c) + 1.0).abs() < 1e-15);
    assert_eq!(centered_cosine(&[1.0, 1.0], &[0.0, 1.0], &c), 0.0);
    assert_eq!(default_t_inject(100), 25);
    assert_eq!(default_t_inject(3), 1);
}

#[test]
fn reconstruction_follows_the_training_set() {
    let s = NoiseSchedule::linear(40).unwrap();
    let data = split();
    let full = OracleDenoiser::new(data.full(), s.clone()).unwrap();
    let reference = retrained_reference(&data, &s).unwrap();
    let a = data.forget().row(0);
    let center = [0.0, 0.0];
    let mean_sim = |m: &OracleDenoiser<f64>| {
        let sims: Vec<f64> = (0..20)
            .map(|i| reconstruction_similarity(m, &s, a, &center, &mut RngStream::new(43, i), 2).unwrap())
            .collect();
        stats::mean(&sims)
    };
    let (with, without) = (mean_sim(&full), mean_sim(&reference));
    assert!(with > 0.99, "{with}");
    // The nearest remaining points sit at 45 degrees from a_u.
    assert!(without < 0.9, "{without}");
    assert!(reconstruction_similarity(&full, &s, a, &center, &mut RngStream::new(0, 0), 40).is_err());
    assert!(reconstruction_similarity(&full, &s, a, &center, &mut RngStream::new(0, 0), 0).is_err());
}

#[test]
fn oracle_distance_properties() {
    let s = NoiseSchedule::linear(20).unwrap();
    let data = split();
    let full = OracleDenoiser::new(data.full(), s.clone()).unwrap();
    let reference = retrained_reference(&data, &s).unwrap();
    let rng = RngStream::new(44, 0);
    assert_eq!(oracle_distance(&full, &full, &s, data.forget(), &[1, 5, 10], 8, &rng).unwrap(), 0.0);
    let gap = oracle_distance(&full, &reference, &s, data.forget(), &[1, 2], 8, &rng).unwrap();
    assert!(gap > 1.0, "{gap}");
    assert!(oracle_distance(&full, &full, &s, data.forget(), &[], 8, &rng).is_err());
    assert!(oracle_distance(&full, &full, &s, data.forget(), &[21], 8, &rng).is_err());
}

#[test]
fn retained_distortion_in_standard_errors() {
    let base = report(vec![0.1, 0.45, 0.45], 10_000);
    assert_eq!(base.retained_distortion(&base, 0), 0.0);
    let moved = report(vec![0.0, 0.5, 0.5], 10_000);
    let se = (stats::proportion_se(0.5, 10_000).powi(2) + stats::proportion_se(0.45, 10_000).powi(2)).sqrt();
    assert!((moved.retained_distortion(&base, 0) - 0.05 / se).abs() < 1e-9);
    assert_eq!(moved.retained_frequencies(0), vec![0.5, 0.5]);
    let degenerate = report(vec![0.0, 1.0, 0.0], 10);
    assert_eq!(degenerate.retained_distortion(&degenerate, 0), 0.0);
    assert_eq!(degenerate.retained_distortion(&report(vec![0.0, 0.0, 1.0], 10), 0), f64::INFINITY);
}

#[test]
fn reports_csv_has_a_column_per_mode() {
    let mut buf = Vec::new();
    write_reports_csv(&[report(vec![0.25, 0.75], 4)], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "config_hash,method,step,seed,frequency,nll_unlearn,nll_remain,recon_similarity,oracle_distance,n_samples,unassigned,mode_0,mode_1"
    );
    assert_eq!(lines.next().unwrap(), "h,m,0,0,0.25,0,0,0,0,4,0,0.25,0.75");
    assert!(write_reports_csv(&[report(vec![1.0], 1), report(vec![0.5, 0.5], 1)], Vec::new()).is_err());
}

#[test]
fn evaluate_is_deterministic_and_separates_the_oracles() {
    let s = NoiseSchedule::linear(40).unwrap();
    let data = split();
    let full = OracleDenoiser::new(data.full(), s.clone()).unwrap();
    let reference = retrained_reference(&data, &s).unwrap();
    let mut centers: Vec<Vec<f64>> = vec![data.forget().row(0).to_vec()];
    centers.extend(data.remain().iter_rows().map(<[f64]>::to_vec));
    let modes = ModeSpec::new(centers, Some(0.3)).unwrap();
    let settings = EvalSettings {
        n_samples: 500,
        n_mc: 8,
        nll_remain_points: 4,
        t_inject: Some(5),
        recon_repeats: 4,
        oracle_t_grid: vec![1, 2, 5],
        oracle_probes_per_point: 8,
    };
    let run = |m: &OracleDenoiser<f64>, name: &str| {
        evaluate(m, &reference, &s, &data, &modes, 0, &settings, name, 0, 45).unwrap()
    };
    let a = run(&full, "full");
    assert_eq!(a, run(&full, "full"));
    let b = run(&reference, "reference");
    assert!(a.frequency > 0.1 && b.frequency < 0.01, "{} {}", a.frequency, b.frequency);
    assert!(a.nll_unlearn < b.nll_unlearn);
    assert!(a.recon_similarity > b.recon_similarity);
    assert_eq!(b.oracle_distance, 0.0);
    assert!(a.oracle_distance > 0.0);
    assert_eq!(a.mode_frequencies.len(), 5);

    let bad = EvalSettings { oracle_t_grid: vec![41], ..settings.clone() };
    assert!(evaluate(&full, &reference, &s, &data, &modes, 0, &bad, "x", 0, 0).is_err());
    assert!(evaluate(&full, &reference, &s, &data, &modes, 9, &settings, "x", 0, 0).is_err());
    assert!(EvalSettings::default().validate(100).is_ok());
    assert!(EvalSettings::default().validate(20).is_err());
}
