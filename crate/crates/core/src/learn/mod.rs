//! Parameters, reverse-mode gradients, optimization and training loops.

mod check;
mod optim;
mod params;
mod tape;
pub mod train;

use thiserror::Error;

pub use check::{
    analytic_gradients, compare_gradients, grad_check, relative_error, GradCheckReport, ParamCheck, FD_STEP,
};
pub use optim::{Adam, AdamConfig};
pub use params::{glorot, uniform, Manifest, ManifestEntry, ParamId, ParamStore};
pub use tape::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("backward called on a value that is not on the tape")]
    GraphNotEvaluated,
    #[error("loss must be a scalar, got a {rows}x{cols} tensor")]
    NotScalar { rows: usize, cols: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::scalar(*v));
        }
        s
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut s = scalar_store(&[0.0]);
        let mut t = Tape::new();
        let x = t.param(&s, 0);
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
        t.backward(y, &mut s).unwrap();
        assert_eq!(s.grad(0).item(), 0.25);
    }

    #[test]
    fn hinge_subgradient() {
        // max(neg - pos + 0.15, 0) with a positive violation
        let mut s = scalar_store(&[0.7, 0.8]);
        let mut t = Tape::new();
        let pos = t.param(&s, 0);
        let neg = t.param(&s, 1);
        let d = t.sub(neg, pos);
        let g = t.constant(Tensor::scalar(0.15));
        let z = t.add(d, g);
        let loss = t.relu(z);
        assert!((t.value(loss).item() - 0.25).abs() < 1e-12);
        t.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(0).item(), -1.0);
        assert_eq!(s.grad(1).item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(2, 2));
        let mut t = Tape::new();
        let w = t.param(&s, 0);
        assert!(matches!(t.backward(w, &mut s), Err(LearnError::NotScalar { .. })));
        let empty = Tape::new();
        assert!(matches!(empty.backward(w, &mut s), Err(LearnError::GraphNotEvaluated)));
    }

    /// A scalar graph touching every tape operation.
    fn everything(s: &ParamStore, t: &mut Tape) -> Var {
        let a = t.param(s, 0); // 3x2
        let b = t.param(s, 1); // 2x3
        let e = t.embed(s, 2, &[1, 0, 1]); // 3x3
        let ab = t.matmul(a, b);
        let sum = t.add(ab, e);
        let diff = t.sub(sum, e);
        let prod = t.mul(diff, sum);
        let r = t.select_rows(e, &[0]);
        let shifted = t.add_row(prod, r);
        let col = t.select_rows(shifted, &[0, 1, 2]);
        let tr = t.transpose(col);
        let c0 = t.select_rows(tr, &[0]);
        let c0t = t.transpose(c0); // 3x1
        let outer = t.outer_add(c0t, r); // 3x3
        let lr = t.leaky_relu(outer, 0.2);
        let mask: Rc<[bool]> = vec![true, false, true, false, false, false, true, true, true].into();
        let sm = t.masked_softmax(lr, mask);
        let scaled = t.scale_rows(sm, c0t);
        let el = t.elu(scaled);
        let sg = t.sigmoid(el);
        let lg = t.log(sg);
        let rl = t.relu(lg);
        let cc = t.concat_cols(&[lg, rl]);
        let cr = t.concat_rows(&[cc, cc]);
        let m = t.mean_rows(cr);
        let k = t.scale(m, 1.5);
        t.sum_all(k)
    }

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("a", uniform(&mut rng, 3, 2, 1.0));
        s.add("b", uniform(&mut rng, 2, 3, 1.0));
        s.add("emb", uniform(&mut rng, 2, 3, 1.0));
        s
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..5 {
            let mut s = random_store(seed);
            let report = grad_check(&mut s, everything, 1e-4, None);
            assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        }
    }

    #[test]
    fn five_param_scalar_graph() {
        let mut s = scalar_store(&[0.3, -1.2, 0.7, 2.0, -0.4]);
        let f = |s: &ParamStore, t: &mut Tape| {
            let p: Vec<Var> = (0..5).map(|i| t.param(s, i)).collect();
            let a = t.mul(p[0], p[1]);
            let b = t.sigmoid(p[2]);
            let c = t.elu(p[4]);
            let d = t.add(a, b);
            let e = t.mul(d, p[3]);
            let f = t.add(e, c);
            t.sigmoid(f)
        };
        let report = grad_check(&mut s, f, 1e-4, None);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("w", uniform(&mut rng, 4, 1, 1.0));
        let x = uniform(&mut rng, 1, 4, 1.0);
        let f = move |s: &ParamStore, t: &mut Tape| {
            let xv = t.constant(x.clone());
            let w = t.param(s, 0);
            t.matmul(xv, w)
        };
        let report = grad_check(&mut s, f, 1e-4, None);
        assert!(report.max_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails_with_name() {
        let mut s = random_store(3);
        let mut analytic = analytic_gradients(&mut s, &everything);
        analytic[1].data[2] += 0.5;
        let report = compare_gradients(&mut s, &analytic, &everything, 1e-4, None);
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().name, "b");
    }

    #[test]
    fn masked_softmax_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(3, 2, vec![2f64.ln(), 0.0, 5.0, 1.0, 3.0, 3.0]));
        let mask: Rc<[bool]> = vec![true, true, false, false, true, true].into();
        let a = t.masked_softmax(x, mask);
        let v = t.value(a);
        assert!((v.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0]);
        assert_eq!(v.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_frozen_untouched() {
        let mut s = random_store(2);
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.update(&mut s);
        assert_eq!(s, before);

        s.set_frozen(0, true);
        for _ in 0..5 {
            analytic_gradients(&mut s, &everything);
            opt.update(&mut s);
        }
        assert_eq!(s.value(0), before.value(0));
        assert_ne!(s.value(1), before.value(1));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut s = scalar_store(&[3.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &s);
        for _ in 0..300 {
            s.zero_grad();
            let mut t = Tape::new();
            let x = t.param(&s, 0);
            let sq = t.mul(x, x);
            t.backward(sq, &mut s).unwrap();
            opt.update(&mut s);
        }
        assert!(s.value(0).item().abs() < 0.05);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = random_store(9);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        s.save(&stem).unwrap();
        let back = ParamStore::load(&stem).unwrap();
        assert_eq!(back.names(), s.names());
        for i in 0..s.len() {
            assert_eq!(back.value(i), s.value(i));
        }
        let manifest = s.manifest();
        assert_eq!(manifest.tensors[1].offset, 6);
        assert_eq!(manifest.tensors[2].shape, [2, 3]);
        assert!(ParamStore::from_parts(&manifest, &s.to_bytes()[..40]).is_err());
    }
}
