use dmc_core::numerics::{gradcheck, NumericsError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Reduces `v` to a scalar with fixed pseudo-random weights so every
/// coordinate gets a distinct upstream gradient.
fn wsum(t: &mut Tape, v: Var) -> Result<Var, NumericsError> {
    let shape = t.value(v).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.5 + (i * 7919 % 13) as f64 / 13.0);
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn check<F>(name: &str, f: F, x: &Tensor)
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let err = gradcheck(f, x, EPS).unwrap();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 1);
        let x = rand_tensor(&mut rng, &[3, 4], 2.0);
        let other = rand_tensor(&mut rng, &[3, 4], 2.0);
        check("sigmoid", |t, v| { let y = t.sigmoid(v); wsum(t, y) }, &x);
        check("log_sigmoid", |t, v| { let y = t.log_sigmoid(v); wsum(t, y) }, &x);
        check("silu", |t, v| { let y = t.silu(v); wsum(t, y) }, &x);
        check("scale", |t, v| { let y = t.scale(v, -1.5); wsum(t, y) }, &x);
        check("add_scalar", |t, v| { let y = t.add_scalar(v, 0.3); let y = t.mul(y, y)?; wsum(t, y) }, &x);
        check("add", |t, v| { let o = t.constant(other.clone()); let y = t.add(v, o)?; let y = t.mul(y, y)?; wsum(t, y) }, &x);
        check("mul", |t, v| { let o = t.constant(other.clone()); let y = t.mul(v, o)?; wsum(t, y) }, &x);
        // Keep samples away from the kink.
        let away = Tensor::from_fn(&[6], |i| {
            let mag = rng.random_range(0.05..2.0);
            if i % 2 == 0 { 0.1 + mag } else { 0.1 - mag }
        });
        check("clamp_min", |t, v| { let y = t.clamp_min(v, 0.1); let y = t.mul(y, y)?; wsum(t, y) }, &away);
    }
}

#[test]
fn matmul_both_sides() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 2);
        let a = rand_tensor(&mut rng, &[3, 5], 1.0);
        let b = rand_tensor(&mut rng, &[5, 2], 1.0);
        check("matmul lhs", |t, v| { let c = t.constant(b.clone()); let y = t.matmul(v, c)?; wsum(t, y) }, &a);
        check("matmul rhs", |t, v| { let c = t.constant(a.clone()); let y = t.matmul(c, v)?; wsum(t, y) }, &b);
    }
}

#[test]
fn norm_embedding_and_loss() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 3);
        let x = rand_tensor(&mut rng, &[3, 6], 1.0);
        let gain = rand_tensor(&mut rng, &[6], 1.0);
        check("rms_norm x", |t, v| { let g = t.constant(gain.clone()); let y = t.rms_norm(v, g, 1e-6)?; wsum(t, y) }, &x);
        check("rms_norm gain", |t, v| { let c = t.constant(x.clone()); let y = t.rms_norm(c, v, 1e-6)?; wsum(t, y) }, &gain);
        let table = rand_tensor(&mut rng, &[5, 3], 1.0);
        check("embedding", |t, v| { let y = t.embedding(v, &[4, 0, 4, 2])?; wsum(t, y) }, &table);
        let logits = rand_tensor(&mut rng, &[4, 7], 2.0);
        check("cross_entropy", |t, v| t.cross_entropy(v, &[0, 6, 3, 3]), &logits);
    }
}

#[test]
fn masked_softmax_logits_and_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 4);
        let logits = rand_tensor(&mut rng, &[3, 4], 2.0);
        let mask = Tensor::from_fn(&[3, 4], |i| if i % 4 > i / 4 + 1 { f64::NEG_INFINITY } else { -(i as f64) * 0.1 });
        check("softmax logits", |t, v| { let m = t.constant(mask.clone()); let y = t.softmax_masked(v, m)?; wsum(t, y) }, &logits);
        // Only finite mask entries can be perturbed.
        let finite = Tensor::from_fn(&[3, 4], |i| -(i as f64) * 0.1 - 0.05);
        check("softmax mask", |t, v| { let l = t.constant(logits.clone()); let y = t.softmax_masked(l, v)?; wsum(t, y) }, &finite);
    }
}

#[test]
fn head_layout_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 5);
        let (n, heads, dh) = (4, 2, 5);
        let x = rand_tensor(&mut rng, &[n, heads * dh], 1.0);
        let w = rand_tensor(&mut rng, &[heads, dh, 3], 1.0);
        check("head_project x", |t, v| { let c = t.constant(w.clone()); let y = t.head_project(v, c)?; wsum(t, y) }, &x);
        check("head_project w", |t, v| { let c = t.constant(x.clone()); let y = t.head_project(c, v)?; wsum(t, y) }, &w);
        check("rope", |t, v| { let y = t.rope(v, heads, 3, 100.0)?; wsum(t, y) }, &x);
        check("select_dim0", |t, v| { let y = t.select_dim0(v, heads)?; let y = t.mul(y, y)?; wsum(t, y) }, &x);
        check("scale_dim0", |t, v| { let y = t.scale_dim0(v, heads, 0.25)?; let y = t.mul(y, y)?; wsum(t, y) }, &x);
        let hn = rand_tensor(&mut rng, &[3, n], 1.0);
        check("head_mean", |t, v| { let y = t.head_mean(v)?; let y = t.mul(y, y)?; wsum(t, y) }, &hn);
    }
}

#[test]
fn accumulate_every_input_and_window() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 6);
        let (n, heads, dh) = (6, 2, 3);
        let x = rand_tensor(&mut rng, &[n, heads * dh], 1.0);
        let alpha = Tensor::from_fn(&[heads, n], |_| rng.random_range(0.05..0.95));
        let omega = Tensor::from_fn(&[heads, n], |_| rng.random_range(0.1..0.9));
        for window in [1, 2, 3, n, n + 2] {
            check(&format!("accumulate x w={window}"), |t, v| {
                let a = t.constant(alpha.clone());
                let o = t.constant(omega.clone());
                let y = t.accumulate(v, a, o, heads, window)?;
                wsum(t, y)
            }, &x);
            check(&format!("accumulate alpha w={window}"), |t, v| {
                let c = t.constant(x.clone());
                let o = t.constant(omega.clone());
                let y = t.accumulate(c, v, o, heads, window)?;
                wsum(t, y)
            }, &alpha);
            check(&format!("accumulate omega w={window}"), |t, v| {
                let c = t.constant(x.clone());
                let a = t.constant(alpha.clone());
                let y = t.accumulate(c, a, v, heads, window)?;
                wsum(t, y)
            }, &omega);
        }
    }
}

#[test]
fn attention_pieces() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 7);
        let (n, heads, kv, dh) = (5, 4, 2, 3);
        let logits = rand_tensor(&mut rng, &[heads, n], 3.0);
        check("dmc_mask", |t, v| {
            let m = t.dmc_mask(v)?;
            let s = t.constant(Tensor::zeros(&[heads, n, n]));
            let p = t.softmax_masked(s, m)?;
            wsum(t, p)
        }, &logits);
        let q = rand_tensor(&mut rng, &[n, heads * dh], 1.0);
        let k = rand_tensor(&mut rng, &[n, kv * dh], 1.0);
        for skip in [false, true] {
            check("head_scores q", |t, v| { let c = t.constant(k.clone()); let y = t.head_scores(v, c, heads, kv, skip, 0.7)?; wsum(t, y) }, &q);
            check("head_scores k", |t, v| { let c = t.constant(q.clone()); let y = t.head_scores(c, v, heads, kv, skip, 0.7)?; wsum(t, y) }, &k);
        }
        let p = rand_tensor(&mut rng, &[heads, n, n], 1.0);
        let vals = rand_tensor(&mut rng, &[n, kv * dh], 1.0);
        check("head_mix p", |t, v| { let c = t.constant(vals.clone()); let y = t.head_mix(v, c, heads, kv)?; wsum(t, y) }, &p);
        check("head_mix v", |t, v| { let c = t.constant(p.clone()); let y = t.head_mix(c, v, heads, kv)?; wsum(t, y) }, &vals);
    }
}

#[test]
fn compression_losses() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + 8);
        // Mostly-append decisions keep the one-sided loss active.
        let a = Tensor::from_fn(&[2, 6], |_| rng.random_range(0.0..0.3));
        check("cr_loss", |t, v| { let b = t.scale(v, 1.0); Ok(t.cr_loss(&[v, b], 3.0)) }, &a);
        let inactive = Tensor::filled(&[2, 6], 0.9);
        let mut tape = Tape::new();
        let v = tape.param(inactive);
        let loss = tape.cr_loss(&[v], 2.0);
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss);
        assert!(tape.grad(v).map_or(true, |g| g.iter().all(|x| *x == 0.0)));
        // Keep every head clear of the per-step mean.
        let spread = loop {
            let t = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.0..1.0));
            let clear = (0..4).all(|step| {
                let mean = (0..3).map(|h| t.at2(h, step)).sum::<f64>() / 3.0;
                (0..3).all(|h| (t.at2(h, step) - mean).abs() > 1e-3)
            });
            if clear {
                break t;
            }
        };
        check("head_consistency", |t, v| t.head_consistency(&[v]), &spread);
    }
}
