//! Finite-difference gradient checking for anything expressible as a
//! scalar function of a `ParamSet`.

use crate::nn::params::ParamSet;
use std::collections::BTreeMap;

/// Relative error between an analytic and a numeric gradient value. The
/// denominator floors at 1 so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare `analytic` gradients against central differences of `f` over
/// every element of every parameter. Returns the maximum relative error.
pub fn grad_check(
    params: &ParamSet,
    f: impl Fn(&ParamSet) -> f64,
    analytic: &BTreeMap<String, Vec<f64>>,
    h: f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).len();
        let ga = &analytic[name];
        assert_eq!(ga.len(), n, "analytic gradient shape for {name}");
        for j in 0..n {
            let orig = params.get(name).values[j];
            work.get_mut(name).values[j] = orig + h;
            let fp = f(&work);
            work.get_mut(name).values[j] = orig - h;
            let fm = f(&work);
            work.get_mut(name).values[j] = orig;
            let gn = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(ga[j], gn));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{FfnParams, FfnSpec, GconvParams, GruParams, mult_attention};
    use crate::nn::params::Session;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const STEP: f64 = 1e-5;

    #[test]
    fn linear_function_is_exact() {
        let mut ps = ParamSet::new();
        ps.insert("x", vec![3], vec![0.4, -1.2, 2.0]);
        let coef = [3.0, -5.0, 0.5];
        let f = |p: &ParamSet| -> f64 {
            p.get("x").values.iter().zip(&coef).map(|(x, c)| x * c).sum()
        };
        let analytic = BTreeMap::from([("x".to_string(), coef.to_vec())]);
        assert!(grad_check(&ps, f, &analytic, STEP) < 1e-10);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut ps = ParamSet::new();
        ps.insert("x", vec![2], vec![1.0, 2.0]);
        let analytic = BTreeMap::from([("x".to_string(), vec![0.0, 0.0])]);
        assert_eq!(grad_check(&ps, |_| 42.0, &analytic, STEP), 0.0);
    }

    fn check_session(ps: &ParamSet, build: impl Fn(&mut Session) -> crate::nn::tape::NodeId) -> f64 {
        let mut s = Session::new(ps);
        let out = build(&mut s);
        let analytic = s.grads(out);
        grad_check(ps, |p| {
            let mut s = Session::new(p);
            let out = build(&mut s);
            s.tape.scalar_value(out)
        }, &analytic, STEP)
    }

    #[test]
    fn gru_gradients_match_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let gru = GruParams::init(&mut ps, "g", 3, 5, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = check_session(&ps, |s| {
                let xi = s.tape.leaf(x.clone());
                let hi = s.tape.leaf(h.clone());
                let out = gru.cell(s, xi, hi).unwrap();
                s.tape.sum(out)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gconv_gradients_match_over_seeds() {
        let adj = vec![
            vec![0.5, 0.5, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(100 + seed);
            let mut ps = ParamSet::new();
            let gc = GconvParams::init(&mut ps, "g", 4, &mut rng);
            let feats: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let err = check_session(&ps, |s| {
                let ids: Vec<_> = feats.iter().map(|f| s.tape.leaf(f.clone())).collect();
                let outs = gc.forward(s, &adj, &ids).unwrap();
                let cat = s.tape.concat(&outs);
                s.tape.sum(cat)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn ffn_gradients_match_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(200 + seed);
            let mut ps = ParamSet::new();
            let ffn = FfnParams::init(&mut ps, "f", FfnSpec::new(vec![4, 6, 2]), &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = check_session(&ps, |s| {
                let xi = s.tape.leaf(x.clone());
                let out = ffn.forward(s, xi).unwrap();
                s.tape.sum(out)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_gradients_match_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(300 + seed);
            let mut ps = ParamSet::new();
            let mut w_rng = rng.clone();
            ps.add_matrix("w", 1, 4, &mut w_rng);
            let y = rng.gen_range(-2.0..2.0);
            let keys: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let err = check_session(&ps, |s| {
                let w = s.param("w");
                let yq = s.tape.scalar(y);
                let kids: Vec<_> = keys.iter().map(|k| s.tape.leaf(k.clone())).collect();
                let (_, pooled) = mult_attention(s, yq, &kids, w).unwrap();
                s.tape.sum(pooled)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gru_ffn_composition_matches() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(400 + seed);
            let mut ps = ParamSet::new();
            let gru = GruParams::init(&mut ps, "g", 2, 4, &mut rng);
            let ffn = FfnParams::init(&mut ps, "f", FfnSpec::new(vec![4, 4, 1]), &mut rng);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = check_session(&ps, |s| {
                let xi = s.tape.leaf(x.clone());
                let h0 = s.tape.zeros(4);
                let h1 = gru.cell(s, xi, h0).unwrap();
                let xi2 = s.tape.leaf(x.clone());
                let h2 = gru.cell(s, xi2, h1).unwrap();
                ffn.forward(s, h2).unwrap()
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
