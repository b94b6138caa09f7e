//! Oracles shared by the integration tests. Written from the textbook
//! formulas, without calling into the library under test.
#![allow(dead_code)]

use potsal::cnn::{Architecture, ToyCnn};
use potsal::evt::{gpd_quantile, GpdParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// GPD log-likelihood straight from the density.
pub fn oracle_log_likelihood(xs: &[f64], scale: f64, shape: f64) -> f64 {
    let mut ll = 0.0;
    for &x in xs {
        let density = if shape == 0.0 {
            (-x / scale).exp() / scale
        } else {
            let base = 1.0 + shape * x / scale;
            if base <= 0.0 {
                return f64::NEG_INFINITY;
            }
            base.powf(-1.0 - 1.0 / shape) / scale
        };
        ll += density.ln();
    }
    ll
}

/// Best log-likelihood on a 200×200 grid over shape ∈ [-0.5, 1] and
/// scale ∈ [0.1, 3], as `(ll, scale, shape)`.
pub fn grid_oracle(xs: &[f64]) -> (f64, f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..200 {
        let shape = -0.5 + 1.5 * i as f64 / 199.0;
        for k in 0..200 {
            let scale = 0.1 + 2.9 * k as f64 / 199.0;
            let ll = oracle_log_likelihood(xs, scale, shape);
            if ll > best.0 {
                best = (ll, scale, shape);
            }
        }
    }
    best
}

/// `n` positive inverse-CDF draws from GPD(scale, shape).
pub fn gpd_sample(n: usize, scale: f64, shape: f64, seed: u64) -> Vec<f64> {
    let p = GpdParams::new(scale, shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| gpd_quantile(rng.random::<f64>(), &p))
        .filter(|&x| x > 0.0)
        .collect()
}

/// Standard normal survival `P(Z > z)`: Maclaurin series of the CDF for
/// `|z| < 3`, the Laplace continued fraction beyond.
pub fn normal_survival(z: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if z.abs() < 3.0 {
        // Φ(z) = 1/2 + φ(z) Σ z^(2n+1) / (1·3·…·(2n+1))
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= z * z / (2.0 * n + 1.0);
            sum += term;
        }
        0.5 - pdf(z) * sum
    } else if z > 0.0 {
        // Q(z) = φ(z) / (z + 1/(z + 2/(z + 3/(z + …)))), evaluated bottom-up
        let mut frac = z;
        for k in (1..200).rev() {
            frac = z + k as f64 / frac;
        }
        pdf(z) / frac
    } else {
        1.0 - normal_survival(-z)
    }
}

const FD_STEP: f64 = 1e-3;

/// Parameter-block boundaries: kernel and bias of each stage, then the
/// classifier weights and bias.
fn blocks(arch: &Architecture) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut first = 0;
    for &f in &arch.stages {
        let (k0, b0) = arch.filter_params(first).unwrap();
        let (_, b_last) = arch.filter_params(first + f - 1).unwrap();
        out.push(k0.start..b0);
        out.push(b0..b_last + 1);
        first += f;
    }
    let fc = out.last().unwrap().end;
    let n = arch.num_params();
    out.push(fc..n - arch.num_classes);
    out.push(n - arch.num_classes..n);
    out
}

/// Central differences with `h = 1e-3`, skipping parameters whose ±h
/// perturbation crosses a ReLU or pooling switch (the loss is not
/// differentiable across those, so the difference quotient is not an oracle
/// there). Blocks no larger than `per_block` are checked exhaustively.
/// Returns the max relative error and the number of parameters checked.
pub fn gradient_check(base: &ToyCnn, per_block: usize) -> (f64, usize) {
    let arch = base.architecture().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let images: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..arch.input_len()).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (b, block) in blocks(&arch).into_iter().enumerate() {
        let mut candidates: Vec<usize> = block.clone().collect();
        candidates.shuffle(&mut rng);
        let want = per_block.min(block.len());
        let mut done = 0;
        for (attempt, &idx) in candidates.iter().cycle().take(20 * block.len()).enumerate() {
            if done == want {
                break;
            }
            let image = &images[(attempt + b) % images.len()];
            let label = attempt % arch.num_classes;
            let sig = base.activation_signature(image).unwrap();
            let mut plus = base.clone();
            plus.params_mut()[idx] += FD_STEP;
            let mut minus = base.clone();
            minus.params_mut()[idx] -= FD_STEP;
            if plus.activation_signature(image).unwrap() != sig
                || minus.activation_signature(image).unwrap() != sig
            {
                continue;
            }
            let numeric =
                (plus.loss(image, label).unwrap() - minus.loss(image, label).unwrap()) / (2.0 * FD_STEP);
            let analytic = base.backward(image, label).unwrap().values[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
            done += 1;
        }
        assert_eq!(done, want, "block {b}: too many kinks");
        checked += done;
    }
    (worst, checked)
}
