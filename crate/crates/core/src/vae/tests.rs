use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{lovasz_class, lovasz_grad};
use super::*;
use crate::hexplane::PlaneKind;
use crate::metrics::miou;
use crate::nn::{scalar, to_f32_vec};
use crate::occgrid::{generate_toy_scene, ToySpec};

fn tiny_config() -> VaeConfig {
    VaeConfig {
        grid: GridDims::new(4, 4, 4, 2),
        num_classes: 3,
        rates: Rates::uniform(2),
        latent_channels: 4,
        feat_channels: 8,
        proj_heads: 2,
        proj_head_dim: 4,
        proj_layers: 2,
        dropout: 0.0,
        pe_freqs: 1,
        dec_hidden: 8,
        dec_up_channels: 4,
        norm_groups: 2,
        logvar_init: -1.0,
    }
}

fn random_grid(dims: GridDims, k: u16, seed: u64) -> SemanticGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..dims.voxels()).map(|_| rng.random_range(0..k) as u8).collect();
    SemanticGrid::new(dims, k, labels).unwrap()
}

fn toy_grid(seed: u64) -> SemanticGrid {
    generate_toy_scene(seed, &ToySpec::default()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    to_f32_vec(a).unwrap().iter().zip(to_f32_vec(b).unwrap()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn toy_feature_volume_shape() {
    let model = VaeModel::new(VaeConfig::toy(), 0).unwrap();
    let g = toy_grid(1);
    let f = model.extract_features(&[&g]).unwrap();
    assert_eq!(f.dims(), &[1, 8, 16, 16, 4, 32]);
}

#[test]
fn identical_frames_give_identical_features() {
    let model = VaeModel::new(tiny_config(), 3).unwrap();
    let f0 = random_grid(GridDims::new(1, 4, 4, 2), 3, 9);
    let g = SemanticGrid::concat_frames(&[f0.clone(), f0.clone(), f0.clone(), f0]).unwrap();
    let f = model.extract_features(&[&g]).unwrap();
    let s0 = f.narrow(1, 0, 1).unwrap();
    for t in 1..4 {
        assert_eq!(max_abs_diff(&s0, &f.narrow(1, t, 1).unwrap()), 0.0);
    }
}

#[test]
fn constant_grid_gives_constant_features() {
    let model = VaeModel::new(VaeConfig::toy(), 0).unwrap();
    let g = SemanticGrid::filled(GridDims::new(8, 32, 32, 8), 6, 0).unwrap();
    let f = model.extract_features(&[&g]).unwrap();
    let v = to_f32_vec(&f).unwrap();
    let c = 32;
    for (i, x) in v.iter().enumerate() {
        assert!((x - v[i % c]).abs() < 1e-6);
    }
}

#[test]
fn indivisible_dims_are_rejected() {
    let mut cfg = tiny_config();
    cfg.grid = GridDims::new(4, 5, 4, 2);
    assert!(matches!(VaeModel::new(cfg, 0), Err(Error::Dims(_))));
    let g = random_grid(GridDims::new(1, 5, 4, 2), 3, 0);
    assert!(one_hot_patches(&[&g], (2, 2, 2), 3).is_err());
}

#[test]
fn mismatched_grid_is_rejected() {
    let model = VaeModel::new(tiny_config(), 0).unwrap();
    let g = random_grid(GridDims::new(4, 4, 4, 4), 3, 0);
    assert!(matches!(model.encode(&[&g], 0, None), Err(Error::Dims(_))));
}

#[test]
fn one_hot_patches_layout() {
    let mut g = SemanticGrid::filled(GridDims::new(1, 2, 2, 2), 3, 0).unwrap();
    g.set(0, 1, 0, 1, 2).unwrap();
    let p = one_hot_patches(&[&g], (2, 2, 2), 3).unwrap();
    assert_eq!(p.dims(), &[1, 1, 24]);
    let v = to_f32_vec(&p).unwrap();
    // sub-index (1,0,1) -> 5, class 2
    assert_eq!(v[5 * 3 + 2], 1.0);
    assert_eq!(v[5 * 3], 0.0);
    assert_eq!(v.iter().sum::<f32>(), 8.0);
}

fn projector(cfg: &VaeConfig, sr: usize, seed: u64) -> (crate::nn::ParamStore, Projector) {
    let mut ps = crate::nn::ParamStore::new(seed, DType::F32);
    let p = Projector::new(&mut ps, "p", cfg, sr).unwrap();
    (ps, p)
}

#[test]
fn project_shape_contract() {
    let cfg = VaeConfig::toy();
    let (_ps, h) = projector(&cfg, 8, 0);
    let x = Tensor::randn(0f32, 1.0, vec![1, 8, 16, 16, 4, 32], &Device::Cpu).unwrap();
    let y = project(&x, &[2, 3, 4], &[1], &h, None).unwrap();
    assert_eq!(y.dims(), &[1, 16, 16, 4, 32]);
}

#[test]
fn project_rejects_bad_partitions() {
    let cfg = tiny_config();
    let (_ps, h) = projector(&cfg, 2, 0);
    let x = Tensor::zeros(vec![1, 2, 3, 2, 8], DType::F32, &Device::Cpu).unwrap();
    assert!(project(&x, &[1, 2], &[2], &h, None).is_err());
    assert!(project(&x, &[1], &[3], &h, None).is_err());
    assert!(project(&x, &[1, 2, 3], &[], &h, None).is_err());
    assert!(project(&x, &[0, 2], &[3], &h, None).is_err());
    assert!(project(&x, &[1, 2], &[4], &h, None).is_err());
}

#[test]
fn project_over_single_token_ignores_attention_scores() {
    let cfg = tiny_config();
    let (ps, h) = projector(&cfg, 1, 5);
    let x = Tensor::randn(0f32, 1.0, (6, 1, 8), &Device::Cpu).unwrap();
    let before = h.forward(&x, None).unwrap();
    for (name, var) in ps.named() {
        if name.contains(".wq.") || name.contains(".wk.") {
            var.set(&Tensor::randn(0f32, 3.0, var.shape(), &Device::Cpu).unwrap()).unwrap();
        }
    }
    let after = h.forward(&x, None).unwrap();
    assert!(max_abs_diff(&before, &after) < 1e-6);
    // Each output row is a function of its own token only.
    let y2 = h.forward(&x.narrow(0, 2, 1).unwrap(), None).unwrap();
    assert!(max_abs_diff(&y2, &after.narrow(0, 2, 1).unwrap()) < 1e-6);
}

#[test]
fn project_commutes_with_kept_axis_permutation() {
    let cfg = tiny_config();
    let (_ps, h) = projector(&cfg, 3, 2);
    let x = Tensor::randn(0f32, 1.0, (1, 5, 3, 8), &Device::Cpu).unwrap();
    let y = project(&x, &[1], &[2], &h, None).unwrap();
    let perm = Tensor::new(&[3u32, 0, 4, 1, 2], &Device::Cpu).unwrap();
    let yp = project(&x.index_select(&perm, 1).unwrap(), &[1], &[2], &h, None).unwrap();
    assert!(max_abs_diff(&yp, &y.index_select(&perm, 1).unwrap()) < 1e-6);
}

#[test]
fn toy_encode_shapes_and_determinism() {
    let model = VaeModel::new(VaeConfig::toy(), 0).unwrap();
    let g = toy_grid(2);
    let (h, mu, _) = model.encode_hexplanes(&g, 11).unwrap();
    let d = h.dims();
    assert_eq!((d.t, d.x, d.y, d.z, d.channels), (4, 16, 16, 4, 16));
    let (h2, mu2, _) = model.encode_hexplanes(&g, 11).unwrap();
    assert_eq!(h.max_abs_diff(&h2), 0.0);
    assert_eq!(mu.max_abs_diff(&mu2), 0.0);
    let (h3, _, _) = model.encode_hexplanes(&g, 12).unwrap();
    assert!(h.max_abs_diff(&h3) > 0.0);
}

#[test]
fn zero_variance_collapses_to_mean() {
    let cfg = tiny_config();
    let model = VaeModel::new(cfg.clone(), 1).unwrap();
    let c = cfg.latent_channels;
    for k in PlaneKind::ALL {
        let name = format!("enc.head_{}.bias", &k.name()[2..]);
        let var = model.params.get(&name).unwrap();
        let mut b: Vec<f32> = to_f32_vec(var.as_tensor()).unwrap();
        b[c..].fill(-1e30);
        var.set(&Tensor::from_vec(b, 2 * c, &Device::Cpu).unwrap()).unwrap();
    }
    let g = random_grid(cfg.grid, 3, 4);
    let (h, mu, _) = model.encode_hexplanes(&g, 99).unwrap();
    assert_eq!(h.max_abs_diff(&mu), 0.0);
}

fn restore_identity(model: &VaeModel) {
    let c = model.config.latent_channels;
    for kind in ["tx", "ty", "tz"] {
        let w = model.params.get(&format!("dec.t_up_{kind}.weight")).unwrap();
        let mut data = vec![0f32; c * 2 * c];
        for i in 0..c {
            data[i * 2 * c + i] = 1.0;
            data[i * 2 * c + c + i] = 1.0;
        }
        w.set(&Tensor::from_vec(data, (c, 2 * c), &Device::Cpu).unwrap()).unwrap();
        let b = model.params.get(&format!("dec.t_up_{kind}.bias")).unwrap();
        b.set(&Tensor::zeros(2 * c, DType::F32, &Device::Cpu).unwrap()).unwrap();
    }
}

#[test]
fn squeeze_of_ones_is_ones_and_zero_plane_absorbs() {
    let model = VaeModel::new(tiny_config(), 0).unwrap();
    restore_identity(&model);
    let d = model.latent_dims();
    let ones = hexplanes_to_tensors(&[HexPlane::filled(d, 1.0)], DType::F32).unwrap();
    let v = to_f32_vec(&model.decoder.expand_squeeze(&ones).unwrap()).unwrap();
    assert_eq!(v.len(), 4 * 2 * 2 * 1 * 4);
    assert!(v.iter().all(|&x| x == 1.0));
    for k in PlaneKind::ALL {
        let mut h = HexPlane::random(d, 3);
        h.plane_mut(k).data.fill(0.0);
        let t = hexplanes_to_tensors(&[h], DType::F32).unwrap();
        let v = to_f32_vec(&model.decoder.expand_squeeze(&t).unwrap()).unwrap();
        assert!(v.iter().all(|&x| x == 0.0), "{k:?}");
    }
}

#[test]
fn squeeze_matches_pointwise_query() {
    let model = VaeModel::new(VaeConfig::toy(), 0).unwrap();
    let d = model.latent_dims();
    let h = HexPlane::random(d, 17);
    let t = hexplanes_to_tensors(&[h], DType::F32).unwrap();
    let restored = model.decoder.restore(&t).unwrap();
    let full = d.with_t(d.t * d.rates.t, 1);
    let h_full = tensors_to_hexplanes(&restored, full).unwrap().remove(0);
    let vol = to_f32_vec(&Decoder::squeeze(&restored).unwrap()).unwrap();
    let c = d.channels;
    let mut worst = 0f32;
    let mut i = 0;
    for tt in 0..full.t {
        for x in 0..full.x {
            for y in 0..full.y {
                for z in 0..full.z {
                    let q = h_full.query(tt, x, y, z).unwrap();
                    for ch in 0..c {
                        worst = worst.max((q[ch] - vol[i]).abs());
                        i += 1;
                    }
                }
            }
        }
    }
    assert!(worst < 1e-5, "max diff {worst}");
}

#[test]
fn toy_decode_shape_and_self_iou() {
    let model = VaeModel::new(VaeConfig::toy(), 0).unwrap();
    let h = HexPlane::random(model.latent_dims(), 1);
    let t = hexplanes_to_tensors(&[h.clone()], DType::F32).unwrap();
    assert_eq!(model.decode_logits(&t).unwrap().dims(), &[1, 8, 32, 32, 8, 6]);
    let q = model.decode(&[h]).unwrap().remove(0);
    assert_eq!(miou(&q, &q, false).unwrap().miou, 1.0);
}

#[test]
fn positional_encoding_separates_equal_features() {
    let model = VaeModel::new(tiny_config(), 4).unwrap();
    let h = HexPlane::filled(model.latent_dims(), 0.5);
    let t = hexplanes_to_tensors(&[h], DType::F32).unwrap();
    let logits = to_f32_vec(&model.decode_logits(&t).unwrap()).unwrap();
    let k = 3;
    let distinct = (0..logits.len() / k).filter(|&i| (logits[i * k] - logits[0]).abs() > 1e-6).count();
    assert!(distinct > logits.len() / k / 2);
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding([2, 4, 1, 1], 2, DType::F64).unwrap();
    assert_eq!(pe.dims(), &[2, 4, 1, 1, 16]);
    let v: Vec<f64> = pe.flatten_all().unwrap().to_vec1().unwrap();
    // point (t=1, x=1): t-axis ω0 = π/2, x-axis ω1 = 2π/4
    let base = (4 + 1) * 16;
    assert!((v[base] - 1.0).abs() < 1e-12);
    assert!(v[base + 1].abs() < 1e-12);
    assert!((v[base + 4 + 2] - 1.0).abs() < 1e-12);
}

#[test]
fn hexplane_tensor_round_trip() {
    let d = tiny_config().latent_dims().unwrap();
    let hs = vec![HexPlane::random(d, 1), HexPlane::random(d, 2)];
    let t = hexplanes_to_tensors(&hs, DType::F32).unwrap();
    let back = tensors_to_hexplanes(&t, d).unwrap();
    assert_eq!(back, hs);
}

#[test]
fn uniform_logits_cross_entropy() {
    let logits = Tensor::zeros((10, 6), DType::F64, &Device::Cpu).unwrap();
    let labels: Vec<u8> = (0..10).map(|i| (i % 6) as u8).collect();
    let ce = scalar(&cross_entropy(&logits, &labels).unwrap()).unwrap();
    assert!((ce - 6f64.ln()).abs() < 1e-12);
    assert!((6f64.ln() - 1.7918).abs() < 1e-4);
}

#[test]
fn standard_posterior_has_zero_kl() {
    let z = || Tensor::zeros((2, 3, 3, 4), DType::F64, &Device::Cpu).unwrap();
    let mu = [z(), z(), z(), z(), z(), z()];
    let lv = mu.clone();
    assert_eq!(scalar(&kl_planes(&mu, &lv).unwrap()).unwrap(), 0.0);
}

#[test]
fn kl_sums_planes_and_averages_batch() {
    let mu: PlaneTensors = std::array::from_fn(|_| Tensor::ones((2, 1, 1, 1), DType::F64, &Device::Cpu).unwrap());
    let lv: PlaneTensors = std::array::from_fn(|_| Tensor::zeros((2, 1, 1, 1), DType::F64, &Device::Cpu).unwrap());
    // per element ½·1; six planes, two batch items, averaged over batch
    assert!((scalar(&kl_planes(&mu, &lv).unwrap()).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_have_zero_lovasz() {
    let labels: Vec<u8> = vec![0, 1, 2, 1, 0];
    let mut data = vec![-50.0f64; 5 * 3];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 3 + l as usize] = 50.0;
    }
    let logits = Tensor::from_vec(data, (5, 3), &Device::Cpu).unwrap();
    assert!(scalar(&lovasz_softmax(&logits, &labels).unwrap()).unwrap() < 1e-12);
}

/// Jaccard loss when the voxels in `wrong` are mispredicted.
fn jaccard_loss(fg: &[f64], wrong: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (f, &w) in fg.iter().zip(wrong) {
        let is_fg = *f == 1.0;
        if is_fg && !w {
            inter += 1.0;
        }
        if is_fg || w {
            union += 1.0;
        }
    }
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

/// Lovász extension by explicit prefix sets, without cumulative sums.
fn lovasz_oracle(errors: &[f64], fg: &[f64]) -> f64 {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));
    let mut wrong = vec![false; n];
    let mut prev = jaccard_loss(fg, &wrong);
    let mut total = 0.0;
    for &i in &order {
        wrong[i] = true;
        let cur = jaccard_loss(fg, &wrong);
        total += errors[i] * (cur - prev);
        prev = cur;
    }
    total
}

#[test]
fn complement_prediction_has_unit_lovasz() {
    let fg = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let errors = [1.0; 8];
    assert!((lovasz_class(&errors, &fg) - 1.0).abs() < 1e-12);
    assert!((lovasz_oracle(&errors, &fg) - 1.0).abs() < 1e-12);
}

#[test]
fn lovasz_matches_prefix_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let fg: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        assert!((lovasz_class(&e, &fg) - lovasz_oracle(&e, &fg)).abs() < 1e-12);
    }
}

#[test]
fn lovasz_grad_sums_to_full_jaccard() {
    let fg = [1.0, 0.0, 1.0, 1.0, 0.0];
    let g: f64 = lovasz_grad(&fg).iter().sum();
    assert!((g - 1.0).abs() < 1e-12);
}

#[test]
fn lovasz_softmax_binary_complement() {
    let labels = vec![1u8, 0, 0, 1];
    let mut data = vec![0.0f64; 8];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 2 + (1 - l as usize)] = 60.0;
    }
    let logits = Tensor::from_vec(data, (4, 2), &Device::Cpu).unwrap();
    let l = scalar(&lovasz_softmax(&logits, &labels).unwrap()).unwrap();
    assert!((l - 1.0).abs() < 1e-9);
}

#[test]
fn loss_errors_on_shape_mismatch() {
    let logits = Tensor::zeros((4, 3), DType::F32, &Device::Cpu).unwrap();
    assert!(cross_entropy(&logits, &[0, 1, 2]).is_err());
    assert!(lovasz_softmax(&logits, &[0, 1, 2, 3]).is_err());
    let z: PlaneTensors = std::array::from_fn(|_| Tensor::zeros((1, 2, 2, 1), DType::F32, &Device::Cpu).unwrap());
    let w: PlaneTensors = std::array::from_fn(|_| Tensor::zeros((1, 2, 3, 1), DType::F32, &Device::Cpu).unwrap());
    assert!(kl_planes(&z, &w).is_err());
    assert!(vae_loss(&logits, &[0, 1, 2, 0], &z, &z, -1.0, 0.0).is_err());
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Central differences of `f` at every entry of `var`.
fn numeric_grad(var: &Var, f: &dyn Fn() -> f64) -> Vec<f64> {
    let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
    let shape = var.shape().clone();
    let eps = 1e-6;
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += eps;
        var.set(&Tensor::from_vec(p.clone(), &shape, &Device::Cpu).unwrap()).unwrap();
        let fp = f();
        p[i] -= 2.0 * eps;
        var.set(&Tensor::from_vec(p, &shape, &Device::Cpu).unwrap()).unwrap();
        let fm = f();
        out.push((fp - fm) / (2.0 * eps));
    }
    var.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap()).unwrap();
    out
}

#[test]
fn loss_terms_pass_finite_difference_checks() {
    let dev = Device::Cpu;
    let logits = Var::from_tensor(&Tensor::new(&[[0.3f64, -0.2, 0.9], [1.1, 0.05, -0.7]], &dev).unwrap()).unwrap();
    let labels = [2u8, 0];
    let mu: Vec<Var> = (0..6)
        .map(|i| Var::from_tensor(&Tensor::new(&[[[[0.1f64 * i as f64 - 0.2, 0.3]]]], &dev).unwrap()).unwrap())
        .collect();
    let lv: Vec<Var> = (0..6)
        .map(|i| Var::from_tensor(&Tensor::new(&[[[[0.05f64 * i as f64, -0.4]]]], &dev).unwrap()).unwrap())
        .collect();
    let planes = |vs: &[Var]| -> PlaneTensors { std::array::from_fn(|i| vs[i].as_tensor().clone()) };
    type Term = fn(&LossTerms) -> &Tensor;
    let terms: [(&str, Term); 4] =
        [("ce", |t| &t.ce), ("lovasz", |t| &t.lovasz), ("kl", |t| &t.kl), ("total", |t| &t.total)];
    for (name, pick) in terms {
        let eval = || -> LossTerms { vae_loss(logits.as_tensor(), &labels, &planes(&mu), &planes(&lv), 1.0, 0.005).unwrap() };
        let grads = pick(&eval()).backward().unwrap();
        let f = || scalar(pick(&eval())).unwrap();
        let mut all_vars = vec![&logits];
        all_vars.extend(mu.iter());
        all_vars.extend(lv.iter());
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for v in all_vars {
            let g = grads
                .get(v.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
                .unwrap_or_else(|| vec![0.0; v.elem_count()]);
            analytic.extend(g);
            numeric.extend(numeric_grad(v, &f));
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "{name}: relative error {e}");
    }
}

#[test]
fn model_gradient_passes_finite_difference_check() {
    let cfg = tiny_config();
    let model = VaeModel::with_dtype(cfg.clone(), 21, DType::F64).unwrap();
    let g = random_grid(cfg.grid, 3, 5);
    let f = || -> Tensor {
        let enc = model.encode(&[&g], 7, None).unwrap();
        let logits = model.decode_logits(&enc.h).unwrap();
        vae_loss(&logits, g.labels(), &enc.mu, &enc.logvar, 1.0, 0.005).unwrap().total
    };
    let grads = f().backward().unwrap();
    let fs = || scalar(&f()).unwrap();
    for name in ["enc.patch.weight", "enc.h_t.layer1.wv.weight", "enc.head_tx.bias", "dec.t_up_ty.weight", "dec.up.bias"] {
        let var = model.params.get(name).unwrap();
        let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let numeric = numeric_grad(var, &fs);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "{name}: relative error {e}");
    }
}

#[test]
fn loss_is_invariant_to_voxel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 12;
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let data: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
    let pd: Vec<f64> = perm.iter().flat_map(|&i| data[i * 4..i * 4 + 4].to_vec()).collect();
    let a = Tensor::from_vec(data, (n, 4), &Device::Cpu).unwrap();
    let b = Tensor::from_vec(pd, (n, 4), &Device::Cpu).unwrap();
    let z: PlaneTensors = std::array::from_fn(|_| Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap());
    let la = vae_loss(&a, &labels, &z, &z, 1.0, 0.005).unwrap();
    let lb = vae_loss(&b, &pl, &z, &z, 1.0, 0.005).unwrap();
    assert!((scalar(&la.total).unwrap() - scalar(&lb.total).unwrap()).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = tiny_config();
    let model = VaeModel::new(cfg.clone(), 2).unwrap();
    let before = model.snapshot().unwrap();
    let mut tr = VaeTrainer::new(model, 0.0, 1.0, 0.005, 0).unwrap();
    let g = random_grid(cfg.grid, 3, 1);
    let r = tr.train_step(&[&g]).unwrap();
    assert!(r.total.is_finite() && !r.skipped);
    assert_eq!(tr.model.snapshot().unwrap(), before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = tiny_config();
    let g = random_grid(cfg.grid, 3, 1);
    let run = || {
        let mut tr = VaeTrainer::new(VaeModel::new(cfg.clone(), 2).unwrap(), 1e-2, 1.0, 0.005, 4).unwrap();
        let reports: Vec<LossReport> = (0..30).map(|_| tr.train_step(&[&g]).unwrap()).collect();
        (reports, tr.model.snapshot().unwrap())
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    assert!(r1.last().unwrap().ce < r1[0].ce);
    assert_eq!(r1.last().unwrap().step, 30);
}

#[test]
fn empty_batch_is_rejected() {
    let mut tr = VaeTrainer::new(VaeModel::new(tiny_config(), 0).unwrap(), 1e-3, 1.0, 0.005, 0).unwrap();
    assert!(tr.train_step(&[]).is_err());
}

#[test]
fn snapshot_round_trip_restores_outputs() {
    let cfg = tiny_config();
    let a = VaeModel::new(cfg.clone(), 1).unwrap();
    let b = VaeModel::new(cfg.clone(), 2).unwrap();
    let g = random_grid(cfg.grid, 3, 6);
    b.load(&a.snapshot().unwrap(), "").unwrap();
    assert_eq!(a.encode_mean(&[&g]).unwrap(), b.encode_mean(&[&g]).unwrap());
    assert_eq!(a.reconstruct(&[&g]).unwrap(), b.reconstruct(&[&g]).unwrap());
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = tiny_config();
    cfg.dropout = 1.0;
    assert!(matches!(VaeModel::new(cfg, 0), Err(e) if e.is_config()));
    let mut cfg = tiny_config();
    cfg.feat_channels = 7;
    assert!(matches!(VaeModel::new(cfg, 0), Err(e) if e.is_config()));
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_is_non_negative(vals in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 6)) {
            let mu: PlaneTensors = std::array::from_fn(|i| Tensor::new(&[[[[vals[i].0]]]], &Device::Cpu).unwrap());
            let lv: PlaneTensors = std::array::from_fn(|i| Tensor::new(&[[[[vals[i].1]]]], &Device::Cpu).unwrap());
            let kl = scalar(&kl_planes(&mu, &lv).unwrap()).unwrap();
            prop_assert!(kl >= 0.0);
            let all_zero = vals.iter().all(|&(m, l)| m == 0.0 && l == 0.0);
            prop_assert_eq!(kl == 0.0, all_zero);
        }

        #[test]
        fn lovasz_is_bounded(errs in proptest::collection::vec(0.0f64..1.0, 1..10), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fg: Vec<f64> = errs.iter().map(|_| rng.random_range(0..2) as f64).collect();
            let l = lovasz_class(&errs, &fg);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
            prop_assert!((l - lovasz_oracle(&errs, &fg)).abs() < 1e-12);
        }
    }
}
