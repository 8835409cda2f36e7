use efn::data::{draw_from_latent, sample_counts, simulate_corpus, SpikeDataset};
use efn::families::GpPrior;
use efn::training::stream;
use efn::Error;

#[test]
fn constant_intensity_gives_poisson_mean_one() {
    let draw = draw_from_latent(0.02, vec![50f64.ln(); 20]);
    for v in &draw.intensity {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let n = 10_000;
    let counts = sample_counts(&draw.intensity, n, &mut stream(1, 0, 0, 0)).unwrap();
    assert_eq!(counts.len(), n);
    // Poisson(1): per-bin mean has standard error 1/√n
    let bound = 4.0 / (n as f64).sqrt();
    for i in 0..20 {
        let mean = counts.iter().map(|r| r[i] as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < bound, "bin {i}: mean {mean}");
    }
}

#[test]
fn corpus_is_seeded_and_round_trips_through_files() {
    let gp = GpPrior::standard();
    let a = simulate_corpus(&gp, 3, 5, 17).unwrap();
    let b = simulate_corpus(&gp, 3, 5, 17).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);

    let dir = tempfile::tempdir().unwrap();
    for (i, ds) in a.iter().enumerate() {
        assert_eq!(ds.bins(), 20);
        assert_eq!(ds.n_trials(), 5);
        let path = dir.path().join(format!("d{i}.json"));
        ds.save(&path).unwrap();
        assert_eq!(&SpikeDataset::load(&path).unwrap(), ds);
    }
}

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn invalid_files_are_rejected_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let negative = write(
        dir.path(),
        "neg.json",
        r#"{"counts": [[1, -2]], "bin_edges": [0.0, 0.5, 1.0], "delta": 0.5}"#,
    );
    match SpikeDataset::load(&negative) {
        Err(Error::Malformed { msg, .. }) => assert!(msg.contains("counts[0][1]"), "{msg}"),
        other => panic!("expected malformed, got {other:?}"),
    }

    let mismatched = write(
        dir.path(),
        "bins.json",
        r#"{"counts": [[1, 2], [1, 2, 3]], "bin_edges": [0.0, 0.5, 1.0], "delta": 0.5}"#,
    );
    match SpikeDataset::load(&mismatched) {
        Err(Error::Malformed { msg, .. }) => assert!(msg.contains("counts[1]"), "{msg}"),
        other => panic!("expected malformed, got {other:?}"),
    }

    let broken = write(dir.path(), "broken.json", "{\n  \"counts\": [[1, 2]],\n  \"bin_edges\": [0.0,\n}");
    match SpikeDataset::load(&broken) {
        Err(Error::Malformed { msg, .. }) => assert!(msg.contains("line"), "{msg}"),
        other => panic!("expected malformed, got {other:?}"),
    }

    let unknown = write(
        dir.path(),
        "extra.json",
        r#"{"counts": [], "bin_edges": [0.0, 0.5], "delta": 0.5, "colour": 1}"#,
    );
    assert!(matches!(SpikeDataset::load(&unknown), Err(Error::Malformed { .. })));
}
