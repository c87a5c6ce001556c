use nlmevi::study::{ScenarioSpec, StudyConfig};
use nlmevi::train::fit;

/// Share of disjoint `w`-epoch windows whose closing loss is not above the
/// opening loss.
fn non_increasing_share(history: &[f64], w: usize) -> f64 {
    let windows: Vec<bool> = history.chunks_exact(w).map(|c| c[w - 1] <= c[0]).collect();
    windows.iter().filter(|&&b| b).count() as f64 / windows.len() as f64
}

#[test]
fn window_share_counts_disjoint_windows() {
    let h = [3.0, 2.0, 2.5, 2.6, 1.0, 0.5];
    assert_eq!(non_increasing_share(&h, 2), 2.0 / 3.0);
}

// Regression on the first PK benchmark replicate. Adam at lr 0.1 produces a
// few transient loss spikes before the plateau drop; each costs a window.
#[test]
fn pk_training_loss_mostly_decreases() {
    let spec = ScenarioSpec::preset("pk", "s1").unwrap();
    let cfg = StudyConfig::preset("pk");
    let problem = spec.problem().unwrap();
    let data = spec.simulate(&problem, 0).unwrap();
    let r = fit(&data, &problem, &cfg.encoder, &cfg.train).unwrap();
    let share = non_increasing_share(&r.train_history, 20);
    println!(
        "epochs {} stop {:?} non-increasing windows {share:.3}",
        r.epochs_run, r.stop_reason
    );
    for (i, c) in r.train_history.chunks_exact(20).enumerate() {
        if c[19] > c[0] {
            println!("window {i}: {:.5} -> {:.5}", c[0], c[19]);
        }
    }
    assert!(share >= 0.9, "non-increasing share {share}");
}
