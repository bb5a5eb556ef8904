//! Feature generators: identity latent → F_I, displacement map → F_E, and
//! the UV sampling that attaches the combined map to mesh vertices.
//!
//! The identity branch decodes a latent through a dense layer into a coarse
//! grid followed by upsample + convolution stages. The expression branch is a
//! two-level encoder-decoder with skip connections over the displacement map.
//! Final layers of both branches are zero-initialized so a fresh model emits
//! a null feature field, and all forwards are recorded on a [`Tape`] so
//! gradients reach latents, displacement texels, and every parameter.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::config::FeatureMapConfig;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Activation slope shared by every non-final layer.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Coarsest grid side of the identity decoder.
const BASE_SIDE: usize = 8;

/// Number of upsample stages for a given map size.
fn n_stages(cfg: &FeatureMapConfig) -> usize {
    let min_side = cfg.h.min(cfg.w);
    (min_side / BASE_SIDE).trailing_zeros() as usize
}

/// Coarse grid dimensions the dense layer decodes into.
fn base_dims(cfg: &FeatureMapConfig) -> (usize, usize) {
    let n = n_stages(cfg);
    (cfg.h >> n, cfg.w >> n)
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Initialize both generator branches: fan-in-scaled uniform weights, zero
/// biases, zero final layers.
pub fn init_generator_params(
    cfg: &FeatureMapConfig,
    rng: &mut impl Rng,
) -> BTreeMap<String, Tensor> {
    let c = cfg.channels;
    let (bh, bw) = base_dims(cfg);
    let mut p = BTreeMap::new();
    let mut dense = |p: &mut BTreeMap<String, Tensor>, name: &str, out: usize, inp: usize| {
        p.insert(format!("{name}.w"), uniform(rng, out, inp, inp));
        p.insert(format!("{name}.b"), Tensor::zeros((1, out)));
    };
    dense(&mut p, "id.fc", bh * bw * c, cfg.latent_dim);
    for s in 0..n_stages(cfg) {
        let name = format!("id.up{s}");
        p.insert(format!("{name}.w"), uniform(rng, c, 9 * c, 9 * c));
        p.insert(format!("{name}.b"), Tensor::zeros((1, c)));
    }
    p.insert("id.out.w".into(), Tensor::zeros((c, 9 * c)));
    p.insert("id.out.b".into(), Tensor::zeros((1, c)));

    let mut conv = |p: &mut BTreeMap<String, Tensor>, name: &str, cout: usize, cin: usize| {
        p.insert(format!("{name}.w"), uniform(rng, cout, 9 * cin, 9 * cin));
        p.insert(format!("{name}.b"), Tensor::zeros((1, cout)));
    };
    conv(&mut p, "expr.enc0", c, 3);
    conv(&mut p, "expr.enc1", 2 * c, c);
    conv(&mut p, "expr.mid", 2 * c, 2 * c);
    conv(&mut p, "expr.dec1", c, 4 * c);
    conv(&mut p, "expr.dec0", c, 2 * c);
    p.insert("expr.out.w".into(), Tensor::zeros((c, 9 * c)));
    p.insert("expr.out.b".into(), Tensor::zeros((1, c)));
    p
}

/// Reject parameter sets containing non-finite entries before any arithmetic.
pub fn check_finite_params(params: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in params {
        if let Some(((r, c), _)) = t
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite {
                node: name.clone(),
                row: r,
                col: c,
            });
        }
    }
    Ok(())
}

fn var(params: &BTreeMap<String, Var>, name: &str) -> Var {
    *params
        .get(name)
        .unwrap_or_else(|| panic!("missing generator parameter {name}"))
}

/// Decode an identity latent `[1, l]` into the identity feature map
/// `[h*w, channels]`.
pub fn identity_features(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    latent: Var,
    cfg: &FeatureMapConfig,
) -> Result<Var> {
    let dim = tape.value(latent).dim();
    if dim != (1, cfg.latent_dim) {
        return Err(Error::DimensionMismatch {
            context: "identity latent",
            expected: cfg.latent_dim,
            got: dim.0 * dim.1,
        });
    }
    let c = cfg.channels;
    let (mut h, mut w) = base_dims(cfg);
    let fc = tape.linear(latent, var(params, "id.fc.w"), var(params, "id.fc.b"));
    let mut x = tape.reshape(fc, h * w, c);
    for s in 0..n_stages(cfg) {
        x = tape.upsample2x(x, h, w);
        h *= 2;
        w *= 2;
        let name = format!("id.up{s}");
        x = tape.conv3x3(
            x,
            var(params, &format!("{name}.w")),
            var(params, &format!("{name}.b")),
            h,
            w,
        );
        x = tape.leaky_relu(x, LEAKY_SLOPE);
    }
    Ok(tape.conv3x3(x, var(params, "id.out.w"), var(params, "id.out.b"), h, w))
}

/// Map a displacement grid `[h*w, 3]` to the expression feature map
/// `[h*w, channels]` through the two-level encoder-decoder.
pub fn expression_features(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    disp: Var,
    cfg: &FeatureMapConfig,
) -> Result<Var> {
    let dim = tape.value(disp).dim();
    if dim != (cfg.h * cfg.w, 3) {
        return Err(Error::DimensionMismatch {
            context: "displacement map rows",
            expected: cfg.h * cfg.w,
            got: dim.0,
        });
    }
    let (h, w) = (cfg.h, cfg.w);
    let conv = |tape: &mut Tape, x, name: &str, h, w| {
        let y = tape.conv3x3(
            x,
            var(params, &format!("{name}.w")),
            var(params, &format!("{name}.b")),
            h,
            w,
        );
        tape.leaky_relu(y, LEAKY_SLOPE)
    };
    let e0 = conv(tape, disp, "expr.enc0", h, w);
    let p0 = tape.avg_pool2x(e0, h, w);
    let e1 = conv(tape, p0, "expr.enc1", h / 2, w / 2);
    let p1 = tape.avg_pool2x(e1, h / 2, w / 2);
    let m = conv(tape, p1, "expr.mid", h / 4, w / 4);
    let u1 = tape.upsample2x(m, h / 4, w / 4);
    let cat1 = tape.concat_cols(&[u1, e1]);
    let d1 = conv(tape, cat1, "expr.dec1", h / 2, w / 2);
    let u0 = tape.upsample2x(d1, h / 2, w / 2);
    let cat0 = tape.concat_cols(&[u0, e0]);
    let d0 = conv(tape, cat0, "expr.dec0", h, w);
    Ok(tape.conv3x3(d0, var(params, "expr.out.w"), var(params, "expr.out.b"), h, w))
}

/// Sample the combined feature map at per-vertex UV coordinates, yielding the
/// `[n_vertices, channels]` features the radiance field anchors on.
pub fn anchor_features(
    tape: &mut Tape,
    combined: Var,
    cfg: &FeatureMapConfig,
    uv_coords: &[[f64; 2]],
) -> Var {
    tape.bilinear_sample(combined, cfg.h, cfg.w, Arc::new(uv_coords.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::leaf_map;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FeatureMapConfig {
        FeatureMapConfig {
            h: 16,
            w: 16,
            channels: 8,
            latent_dim: 16,
        }
    }

    fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn forward_identity(params: &BTreeMap<String, Tensor>, latent: &Tensor, cfg: &FeatureMapConfig) -> Tensor {
        let mut tape = Tape::new();
        let vars = leaf_map(&mut tape, params);
        let z = tape.leaf(latent.clone());
        let out = identity_features(&mut tape, &vars, z, cfg).unwrap();
        tape.value(out).clone()
    }

    fn forward_expression(params: &BTreeMap<String, Tensor>, disp: &Tensor, cfg: &FeatureMapConfig) -> Tensor {
        let mut tape = Tape::new();
        let vars = leaf_map(&mut tape, params);
        let d = tape.leaf(disp.clone());
        let out = expression_features(&mut tape, &vars, d, cfg).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = init_generator_params(&cfg, &mut rng);
        // Wake the zero final layers so the test exercises live outputs.
        params.insert("id.out.w".into(), random_tensor(&mut rng, cfg.channels, 9 * cfg.channels));
        params.insert("expr.out.w".into(), random_tensor(&mut rng, cfg.channels, 9 * cfg.channels));
        let latent = random_tensor(&mut rng, 1, cfg.latent_dim);
        let disp = random_tensor(&mut rng, cfg.h * cfg.w, 3);
        let a = forward_identity(&params, &latent, &cfg);
        let b = forward_identity(&params, &latent, &cfg);
        assert_eq!(a, b);
        let c = forward_expression(&params, &disp, &cfg);
        let d = forward_expression(&params, &disp, &cfg);
        assert_eq!(c, d);
    }

    #[test]
    fn fresh_params_emit_null_feature_field() {
        let cfg = FeatureMapConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_generator_params(&cfg, &mut rng);
        let latent = random_tensor(&mut rng, 1, cfg.latent_dim);
        let fi = forward_identity(&params, &latent, &cfg);
        assert!(fi.iter().all(|&v| v == 0.0));
        let disp = Tensor::zeros((cfg.h * cfg.w, 3));
        let fe = forward_expression(&params, &disp, &cfg);
        assert!(fe.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_dimension_mismatch_is_rejected() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = init_generator_params(&cfg, &mut rng);
        let mut tape = Tape::new();
        let vars = leaf_map(&mut tape, &params);
        let bad = tape.leaf(Tensor::zeros((1, cfg.latent_dim + 1)));
        assert!(identity_features(&mut tape, &vars, bad, &cfg).is_err());
        let bad_disp = tape.leaf(Tensor::zeros((3, 3)));
        assert!(expression_features(&mut tape, &vars, bad_disp, &cfg).is_err());
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = init_generator_params(&cfg, &mut rng);
        assert!(check_finite_params(&params).is_ok());
        params.get_mut("expr.mid.w").unwrap()[[1, 4]] = f64::NAN;
        let err = check_finite_params(&params).unwrap_err();
        assert!(err.to_string().contains("expr.mid.w"));
    }

    /// Central finite differences of mean(F_I) with respect to latent
    /// coordinates, step 1e-4, must match the tape gradient to 1e-4 relative.
    #[test]
    fn identity_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = init_generator_params(&cfg, &mut rng);
        params.insert("id.out.w".into(), random_tensor(&mut rng, cfg.channels, 9 * cfg.channels));
        let latent = random_tensor(&mut rng, 1, cfg.latent_dim);

        let mut tape = Tape::new();
        let vars = leaf_map(&mut tape, &params);
        let z = tape.leaf(latent.clone());
        let fi = identity_features(&mut tape, &vars, z, &cfg).unwrap();
        let loss = tape.mean(fi);
        tape.backward(loss).unwrap();
        let grad = tape.grad(z).unwrap().clone();

        let step = 1e-4;
        for i in 0..cfg.latent_dim {
            let mut plus = latent.clone();
            plus[[0, i]] += step;
            let mut minus = latent.clone();
            minus[[0, i]] -= step;
            let f = |l: &Tensor| forward_identity(&params, l, &cfg).mean().unwrap();
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let a = grad[[0, i]];
            let err = (a - fd).abs();
            assert!(
                err <= 1e-8 + 1e-4 * a.abs().max(fd.abs()),
                "latent[{i}]: analytic {a} vs fd {fd}"
            );
        }
    }

    /// Random scalar projection of F_E differentiated against random
    /// displacement texels and an encoder weight, checked by central
    /// differences.
    #[test]
    fn expression_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut params = init_generator_params(&cfg, &mut rng);
        params.insert("expr.out.w".into(), random_tensor(&mut rng, cfg.channels, 9 * cfg.channels));
        let disp = random_tensor(&mut rng, cfg.h * cfg.w, 3);
        let proj = random_tensor(&mut rng, cfg.h * cfg.w, cfg.channels);

        let project = |params: &BTreeMap<String, Tensor>, disp: &Tensor| {
            (forward_expression(params, disp, &cfg) * &proj).sum()
        };

        let mut tape = Tape::new();
        let vars = leaf_map(&mut tape, &params);
        let d = tape.leaf(disp.clone());
        let fe = expression_features(&mut tape, &vars, d, &cfg).unwrap();
        let p = tape.constant(proj.clone());
        let weighted = tape.mul(fe, p);
        let loss = tape.sum(weighted);
        tape.backward(loss).unwrap();
        let disp_grad = tape.grad(d).unwrap().clone();
        let enc_grad = tape.grad(vars["expr.enc1.w"]).unwrap().clone();

        let step = 1e-4;
        for _ in 0..10 {
            let r = rng.gen_range(0..cfg.h * cfg.w);
            let c = rng.gen_range(0..3);
            let mut plus = disp.clone();
            plus[[r, c]] += step;
            let mut minus = disp.clone();
            minus[[r, c]] -= step;
            let fd = (project(&params, &plus) - project(&params, &minus)) / (2.0 * step);
            let a = disp_grad[[r, c]];
            assert!(
                (a - fd).abs() <= 1e-8 + 1e-4 * a.abs().max(fd.abs()),
                "disp[{r},{c}]: analytic {a} vs fd {fd}"
            );
        }
        for _ in 0..5 {
            let r = rng.gen_range(0..2 * cfg.channels);
            let c = rng.gen_range(0..9 * cfg.channels);
            let mut pp = params.clone();
            pp.get_mut("expr.enc1.w").unwrap()[[r, c]] += step;
            let mut pm = params.clone();
            pm.get_mut("expr.enc1.w").unwrap()[[r, c]] -= step;
            let fd = (project(&pp, &disp) - project(&pm, &disp)) / (2.0 * step);
            let a = enc_grad[[r, c]];
            assert!(
                (a - fd).abs() <= 1e-8 + 1e-4 * a.abs().max(fd.abs()),
                "enc1.w[{r},{c}]: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn anchoring_is_linear_in_the_map() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let fi = random_tensor(&mut rng, cfg.h * cfg.w, cfg.channels);
        let fe = random_tensor(&mut rng, cfg.h * cfg.w, cfg.channels);
        let uvs: Vec<[f64; 2]> = (0..200)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let mut tape = Tape::new();
        let a = tape.constant(fi.clone());
        let b = tape.constant(fe.clone());
        let sum = tape.add(a, b);
        let s_apart_a = anchor_features(&mut tape, a, &cfg, &uvs);
        let s_apart_b = anchor_features(&mut tape, b, &cfg, &uvs);
        let s_joint = anchor_features(&mut tape, sum, &cfg, &uvs);
        let apart = tape.value(s_apart_a) + tape.value(s_apart_b);
        let joint = tape.value(s_joint);
        let max_diff = (&apart - joint)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn anchoring_matches_texel_centers_and_constants() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let grid = random_tensor(&mut rng, cfg.h * cfg.w, cfg.channels);
        // UV at the exact center of texel (row 2, col 3).
        let uvs = vec![[(3.0 + 0.5) / cfg.w as f64, (2.0 + 0.5) / cfg.h as f64]];
        let mut tape = Tape::new();
        let g = tape.constant(grid.clone());
        let sampled = anchor_features(&mut tape, g, &cfg, &uvs);
        assert_eq!(tape.value(sampled).row(0), grid.row(2 * cfg.w + 3));

        let constant = Tensor::from_elem((cfg.h * cfg.w, cfg.channels), 0.75);
        let mut tape = Tape::new();
        let g = tape.constant(constant);
        let uvs: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let sampled = anchor_features(&mut tape, g, &cfg, &uvs);
        for v in tape.value(sampled).iter() {
            assert!((v - 0.75).abs() <= 1e-12);
        }
    }
}
