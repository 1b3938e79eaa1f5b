use rte_core::poisson::{PathBundle, PoissonPath, StreamId};

fn stream(seed: u64, rep: u64, process: u32) -> PoissonPath {
    PoissonPath::new(seed, StreamId { replication: rep, process })
}

// Kolmogorov–Smirnov against Exp(1), n = 1e5, at the 0.1% level.
#[test]
fn gaps_are_unit_exponential() {
    let n = 100_000;
    let mut p = stream(0x5EED, 7, 2);
    let mut u = 0.0;
    while p.epochs().len() < n {
        u = p.next_epoch_after(u);
    }
    let e = p.epochs();
    let mut gaps: Vec<f64> = std::iter::once(e[0]).chain(e.windows(2).map(|w| w[1] - w[0])).take(n).collect();
    gaps.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let cdf = -(-g).exp_m1();
            (cdf - i as f64 / nf).abs().max(((i + 1) as f64 / nf - cdf).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.949 / nf.sqrt(), "KS statistic {d}");
}

#[test]
fn bundle_streams_are_keyed_not_ordered() {
    let mut a = PathBundle::new(11, 4, 3);
    let mut b = PathBundle::new(11, 4, 3);
    // different query orders
    a.path(2).count_at(50.0).unwrap();
    a.path(0).count_at(10.0).unwrap();
    b.path(0).count_at(30.0).unwrap();
    b.path(2).count_at(5.0).unwrap();
    for k in [0, 2] {
        let ea = a.path(k).epochs().to_vec();
        let eb = b.path(k).epochs().to_vec();
        let m = ea.len().min(eb.len());
        assert_eq!(ea[..m], eb[..m]);
    }
    let mut c = PathBundle::new(11, 5, 3);
    c.path(0).count_at(10.0).unwrap();
    assert_ne!(c.path(0).epochs()[0], a.path(0).epochs()[0]);
}

#[test]
fn counts_match_increments() {
    let mut p = stream(3, 0, 0);
    let total = p.count_at(40.0).unwrap();
    let pieces: u64 = (0..40).map(|i| p.increment(i as f64, (i + 1) as f64).unwrap()).sum();
    assert_eq!(total, pieces);
    // counts are inclusive of an epoch sitting exactly on the query point
    let e3 = p.epochs()[3];
    assert_eq!(p.count_at(e3).unwrap(), 4);
    assert_eq!(p.count_at(e3.next_down()).unwrap(), 3);
}
