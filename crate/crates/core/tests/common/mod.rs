#![allow(dead_code)]

use bms_bench::data::{self, parse_timestamp, ExogenousSeries, GeneratorConfig};
use bms_bench::env::BatteryParams;
use bms_bench::nn::{log_softmax, Head, Mlp};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hourly series starting Monday 2017-07-03 00:00.
pub fn series(prices: &[f64], demands: &[f64]) -> ExogenousSeries {
    let t0 = parse_timestamp("2017-07-03T00:00:00", 0).unwrap();
    let ts = (0..prices.len())
        .map(|i| t0 + chrono::Duration::hours(i as i64))
        .collect();
    ExogenousSeries::new(ts, prices.to_vec(), demands.to_vec()).unwrap()
}

/// Default generator, 60 days, split in half: 30 days train, 30 days test.
pub fn default_split() -> (ExogenousSeries, ExogenousSeries) {
    data::split(&data::generate(&GeneratorConfig::default()).unwrap(), 0.5).unwrap()
}

/// Rank used to pick among tied optimal sequences: idle, discharge, charge.
fn rank(step: i32) -> u8 {
    match step {
        0 => 0,
        -1 => 1,
        _ => 2,
    }
}

/// Exhaustive search over every `{-1, 0, +1}^n` step sequence that keeps the
/// lattice level in bounds. Returns the best cost and, among sequences within
/// `tie` of it, the lexicographically preferred one.
pub fn enumerate(
    prices: &[f64],
    demands: &[f64],
    level0: i32,
    levels: i32,
    p: &BatteryParams,
    tie: f64,
) -> (f64, Vec<i32>) {
    let n = prices.len();
    let mut all: Vec<(f64, Vec<i32>)> = Vec::new();
    let mut seq = vec![0i32; n];
    fn rec(
        k: usize,
        level: i32,
        cost: f64,
        seq: &mut Vec<i32>,
        out: &mut Vec<(f64, Vec<i32>)>,
        ctx: (&[f64], &[f64], i32, &BatteryParams),
    ) {
        let (prices, demands, levels, p) = ctx;
        if k == prices.len() {
            out.push((cost, seq.clone()));
            return;
        }
        for step in [-1, 0, 1] {
            let next = level + step;
            if next < 0 || next >= levels {
                continue;
            }
            seq[k] = step;
            let c = prices[k] * (p.capacity_kwh * p.a_max * step as f64 + demands[k]);
            rec(k + 1, next, cost + c, seq, out, ctx);
        }
    }
    rec(0, level0, 0.0, &mut seq, &mut all, (prices, demands, levels, p));
    let best = all.iter().map(|(c, _)| *c).fold(f64::INFINITY, f64::min);
    let preferred = all
        .into_iter()
        .filter(|(c, _)| *c <= best + tie)
        .map(|(_, s)| s)
        .min_by(|a, b| {
            let ra: Vec<u8> = a.iter().map(|&s| rank(s)).collect();
            let rb: Vec<u8> = b.iter().map(|&s| rank(s)).collect();
            ra.cmp(&rb)
        })
        .unwrap();
    (best, preferred)
}

pub fn random_params(rng: &mut ChaCha8Rng) -> (BatteryParams, i32) {
    let levels = rng.random_range(2..=7);
    let a_max = [0.05, 0.1, 0.125][rng.random_range(0..3)];
    let soc_min = a_max * rng.random_range(0..3) as f64;
    let soc_max = soc_min + a_max * (levels - 1) as f64;
    let p = BatteryParams {
        capacity_kwh: rng.random_range(1.0..20.0),
        soc_min,
        soc_max,
        a_max,
        step_hours: 1.0,
    };
    p.validate().unwrap();
    (p, levels)
}

/// Scalar loss on a batch: cross-entropy for softmax heads, a fixed linear
/// functional of the outputs for linear heads. Returns the loss and its
/// gradient with respect to the logits.
fn loss(net: &Mlp, x: &Array2<f64>, targets: &[usize], weights: &Array2<f64>) -> (f64, Array2<f64>) {
    let fwd = net.forward(x).unwrap();
    match net.head() {
        Head::Softmax => {
            let mut l = 0.0;
            let mut g = fwd.output.clone();
            for (r, &y) in targets.iter().enumerate() {
                let lp = log_softmax(&fwd.logits.row(r).to_vec());
                l -= lp[y];
                g[[r, y]] -= 1.0;
            }
            (l, g)
        }
        Head::Linear => ((&fwd.logits * weights).sum(), weights.clone()),
    }
}

/// Builds a random net (depth 1 to 3, softmax or linear head), compares
/// backprop with central differences (h = 1e-5) on every parameter and
/// returns the worst relative error.
pub fn fd_check_random_net(rng: &mut ChaCha8Rng, softmax_head: bool) -> f64 {
    let h = 1e-5;
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        widths.push(rng.random_range(1..=8));
    }
    let head = if softmax_head { Head::Softmax } else { Head::Linear };
    widths.push(rng.random_range(if softmax_head { 2 } else { 1 }..=4));
    let mut net = Mlp::new(&widths, head, rng).unwrap();
    let batch = rng.random_range(1..=4);
    let x = Array2::from_shape_fn((batch, widths[0]), |_| rng.random_range(-2.0..2.0));
    let out = *widths.last().unwrap();
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..out)).collect();
    let weights = Array2::from_shape_fn((batch, out), |_| rng.random_range(-1.0..1.0));

    let (_, upstream) = loss(&net, &x, &targets, &weights);
    let tape = net.forward(&x).unwrap().tape;
    let analytic = net.backward(tape, &upstream).unwrap().flatten();
    let theta = net.params_flat();
    assert_eq!(theta.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        net.set_params_flat(&plus).unwrap();
        let lp = loss(&net, &x, &targets, &weights).0;
        let mut minus = theta.clone();
        minus[i] -= h;
        net.set_params_flat(&minus).unwrap();
        let lm = loss(&net, &x, &targets, &weights).0;
        let fd = (lp - lm) / (2.0 * h);
        let g = analytic[i];
        worst = worst.max((g - fd).abs() / (g.abs() + fd.abs()).max(1e-6));
    }
    worst
}
