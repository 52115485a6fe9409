//! Independent loop oracles shared by the acceptance runner and the oracle tests.
//!
//! Everything here is written from the definitions with plain loops in f64.
//! Nothing routes through the graph or the library's reductions.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use space_core::config::RunConfig;
use space_core::datasets::RegionMask;
use space_core::graph::Graph;
use space_core::imaging::PixelImage;
use space_core::losses::{logical_graph, logical_losses, scl_graph, scl_losses, CriterionState};
use space_core::metrics::{auroc, spro_auc, RegionItem};
use space_core::networks::{
    converter_forward, encoder_features, fm_forward, init_converter, normalize_teacher, pdn_features,
    student_forward, teacher_forward, compute_teacher_stats, FeatureMap, NetworkConfig, Networks, ParamSet,
};
use space_core::scoring::{calibrate, raw_maps, score_maps, CalibrationStats, Model};
use space_core::tensor::Tensor;

pub type Check = Result<(), String>;

/// How a stop-gradient toy ended once its exact checks passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fd {
    /// Central differences were compared against autodiff.
    Compared,
    /// The instance cannot resolve 1e-4 relative error in f32, so only the
    /// exact checks ran.
    Degenerate,
}

pub type FdCheck = Result<Fd, String>;

/// `|a − b| ≤ tol·max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn fmap(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
    FeatureMap {
        values: Tensor::new(vec![c, h, w], data).unwrap(),
    }
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, amp: f32) -> FeatureMap {
    fmap(c, h, w, (0..c * h * w).map(|_| rng.random_range(-amp..amp)).collect())
}

fn sq(a: f32, b: f32) -> f64 {
    let d = a - b;
    (d * d) as f64
}

fn mean_where(values: &[f64], keep: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, k) in values.iter().zip(keep) {
        if *k {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Structural loss terms `[l_ts, l_ow, l_os, l_ws, l_structural]` and the
/// advanced criterion. `upsilon = None` means a fresh criterion, seeded from
/// this step's distillation error.
pub fn scl_oracle(
    t: &FeatureMap,
    s_o: &FeatureMap,
    s_w: &FeatureMap,
    s_s: &FeatureMap,
    upsilon: Option<&[f64]>,
    alpha: f64,
    lambda1: f64,
) -> ([f64; 5], Vec<f64>) {
    let (t, o, w, s) = (t.values.data(), s_o.values.data(), s_w.values.data(), s_s.values.data());
    let n = t.len();
    let f_o: Vec<f64> = (0..n).map(|i| sq(t[i], o[i])).collect();
    let f_w: Vec<f64> = (0..n).map(|i| sq(t[i], w[i])).collect();
    let f_s: Vec<f64> = (0..n).map(|i| sq(t[i], s[i])).collect();
    let d_ow: Vec<f64> = (0..n).map(|i| sq(o[i], w[i])).collect();
    let d_os: Vec<f64> = (0..n).map(|i| sq(o[i], s[i])).collect();
    let d_ws: Vec<f64> = (0..n).map(|i| sq(w[i], s[i])).collect();
    let ups: Vec<f64> = match upsilon {
        Some(u) => u.to_vec(),
        None => f_o.clone(),
    };
    let m_o: Vec<bool> = (0..n).map(|i| f_o[i] > ups[i]).collect();
    let m_w: Vec<bool> = (0..n).map(|i| f_w[i] < ups[i]).collect();
    let m_s: Vec<bool> = (0..n).map(|i| f_s[i] < ups[i]).collect();
    let m_ws: Vec<bool> = (0..n).map(|i| m_w[i] && m_s[i]).collect();
    let l_ts = mean_where(&f_o, &m_o);
    let l_ow = mean_where(&d_ow, &m_w);
    let l_os = mean_where(&d_os, &m_s);
    let l_ws = mean_where(&d_ws, &m_ws);
    let next = match upsilon {
        Some(u) => (0..n).map(|i| alpha * u[i] + (1.0 - alpha) * f_o[i]).collect(),
        None => ups,
    };
    ([l_ts, l_ow, l_os, l_ws, l_ts + lambda1 * (l_ow + l_os + l_ws)], next)
}

/// Zero-padded, stride-1 convolution of a `C × H × W` map.
pub fn conv_same(x: &[f64], c: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let s = weight.shape();
    let (oc, k) = (s[0], s[2]);
    let pad = (k / 2) as i64;
    let wd = weight.data();
    let mut out = vec![0.0; oc * h * w];
    for o in 0..oc {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[o] as f64;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as i64 + ky as i64 - pad;
                            let ix = xx as i64 + kx as i64 - pad;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let wv = wd[((o * c + ci) * k + ky) * k + kx] as f64;
                            acc += wv * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Converter: `f + conv_L(relu(… relu(conv_1(f))))`, identity without layers.
pub fn converter_oracle(f: &FeatureMap, layers: usize, fm: &ParamSet) -> Vec<f64> {
    let (c, h, w) = f.dims();
    let base: Vec<f64> = f.values.data().iter().map(|&v| v as f64).collect();
    if layers == 0 {
        return base;
    }
    let mut cur = base.clone();
    for i in 0..layers {
        if i > 0 {
            cur.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let wt = fm.get(&format!("conv{}.weight", i + 1)).unwrap();
        let bs = fm.get(&format!("conv{}.bias", i + 1)).unwrap();
        cur = conv_same(&cur, c, h, w, wt, bs);
    }
    base.iter().zip(&cur).map(|(a, b)| a + b).collect()
}

/// Linear interpolation between order statistics at `q·(N−1)`.
pub fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p = q * (v.len() - 1) as f64;
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (p - lo as f64) * (v[hi] - v[lo])
}

/// `[l_fae, l_fm, l_logical]`.
pub fn logical_oracle(
    t: &FeatureMap,
    ae: &FeatureMap,
    s: &FeatureMap,
    layers: usize,
    fm: &ParamSet,
    q: f64,
    lambda2: f64,
) -> [f64; 3] {
    let (t, a) = (t.values.data(), ae.values.data());
    let l_fae = (0..t.len()).map(|i| sq(a[i], t[i])).sum::<f64>() / t.len() as f64;
    let conv = converter_oracle(s, layers, fm);
    let z: Vec<f64> = a.iter().zip(&conv).map(|(&x, y)| (x as f64 - y).powi(2)).collect();
    let d_hard = quantile_oracle(&z, q);
    let keep: Vec<bool> = z.iter().map(|&v| v >= d_hard).collect();
    let l_fm = mean_where(&z, &keep);
    [l_fae, l_fm, l_fae + lambda2 * l_fm]
}

/// One random instance of both losses checked against the oracles.
pub fn loss_instance(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=4);
    let h = rng.random_range(1..=5);
    let w = rng.random_range(1..=5);
    let maps: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, c, h, w, 0.5)).collect();
    let alpha = [0.0, 0.5, 0.9, 0.999][rng.random_range(0..4)];
    let lambda1 = rng.random_range(0.0f32..2.0);

    let fresh = rng.random_bool(0.2);
    let ups: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..0.6)).collect();
    let mut crit = if fresh {
        CriterionState::new(alpha)
    } else {
        let mut k = CriterionState::constant(&[c, h, w], 0.0, alpha);
        k.upsilon = ups.clone();
        k
    };
    let (bundle, _) = scl_losses(&maps[0], &maps[1], &maps[2], &maps[3], &mut crit, lambda1).map_err(|e| e.to_string())?;
    let (want, next) = scl_oracle(
        &maps[0],
        &maps[1],
        &maps[2],
        &maps[3],
        (!fresh).then_some(ups.as_slice()),
        alpha,
        lambda1 as f64,
    );
    let got = [bundle.l_ts, bundle.l_ow, bundle.l_os, bundle.l_ws, bundle.l_structural];
    for (name, (g, w)) in ["l_ts", "l_ow", "l_os", "l_ws", "l_structural"].iter().zip(got.iter().zip(want)) {
        ensure((*g as f64 - w).abs() < 1e-6, || format!("seed {seed}: {name} {g} vs oracle {w}"))?;
    }
    for (g, w) in crit.upsilon.iter().zip(&next) {
        ensure((g - w).abs() < 1e-6, || format!("seed {seed}: criterion {g} vs oracle {w}"))?;
    }

    let layers = rng.random_range(0..=3);
    let kernel = [1, 3][rng.random_range(0..2)];
    let cfg = NetworkConfig {
        feature_dim: c,
        fm_layers: layers,
        fm_kernel: kernel,
        ..NetworkConfig::tiny()
    };
    // small weights keep Z near unit scale, where f32 rounding sits well below the tolerance
    let mut fm = init_converter(&cfg, &mut rng);
    for (name, t) in fm.clone().iter() {
        let data = t.data().iter().map(|v| 0.25 * v).collect();
        fm.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    let q = [0.0, 0.5, 0.9, 0.99, 1.0][rng.random_range(0..5)];
    let lambda2 = rng.random_range(0.0f32..1.0);
    let lb = logical_losses(&maps[0], &maps[1], &maps[2], &cfg, &fm, q, lambda2).map_err(|e| e.to_string())?;
    let want = logical_oracle(&maps[0], &maps[1], &maps[2], layers, &fm, q, lambda2 as f64);
    for (name, (g, w)) in ["l_fae", "l_fm", "l_logical"]
        .iter()
        .zip([lb.l_fae, lb.l_fm, lb.l_logical].iter().zip(want))
    {
        ensure((*g as f64 - w).abs() < 1e-6, || format!("seed {seed}: {name} {g} vs oracle {w}"))?;
    }
    Ok(())
}

// ---- gradient blocking on a one-parameter student --------------------------

const TOY: (usize, usize) = (4, 4);

// Toy inputs are multiples of 1/64 and toy parameters multiples of 1/4096,
// so `θ·x` and `θ ± h` for power-of-two `h` are exact in f32.
fn toy_input(rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = TOY;
    Tensor::new(vec![1, 1, h, w], (0..h * w).map(|_| rng.random_range(-64i32..=64) as f32 / 64.0).collect()).unwrap()
}

fn toy_param(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    loop {
        let v = rng.random_range((lo * 4096.0) as i32..(hi * 4096.0) as i32);
        if v != 0 {
            return v as f32 / 4096.0;
        }
    }
}

/// Finite-difference steps, largest first.
const FD_STEPS: [f32; 3] = [1.0 / 128.0, 1.0 / 512.0, 1.0 / 2048.0];

/// Central difference of `f` at `x`, over the exact f32 step taken.
fn central(f: impl Fn(f32) -> Result<f64, String>, x: f32, h: f32) -> Result<f64, String> {
    let (p, m) = (x + h, x - h);
    Ok((f(p)? - f(m)?) / (p as f64 - m as f64))
}

/// Whether autodiff in f32 can match the derivative of `f` at `x` to 1e-4
/// relative error. Its rounding scales with `sqrt(f·f'')`, the size of the
/// summed per-location terms, so the derivative must not cancel far below that.
fn resolvable(f: impl Fn(f32) -> Result<f64, String>, x: f32, h: f32) -> Result<bool, String> {
    let (p, c, m) = (f(x + h)?, f(x)?, f(x - h)?);
    let h = h as f64;
    let d1 = (p - m) / (2.0 * h);
    let d2 = ((p - 2.0 * c + m) / (h * h)).max(0.0);
    Ok(d1 != 0.0 && d1.abs() >= 0.05 * (c * d2).sqrt())
}

/// Largest step in [`FD_STEPS`] whose perturbations leave `masks` unchanged.
fn stable_step(x: f32, masks: impl Fn(f32) -> Result<bool, String>) -> Result<Option<f32>, String> {
    for h in FD_STEPS {
        if masks(x + h)? && masks(x - h)? {
            return Ok(Some(h));
        }
    }
    Ok(None)
}

/// The toy network is a single 1×1 convolution without bias: `f(x) = θ·x`.
fn toy_forward(x: &Tensor, theta: f32) -> FeatureMap {
    let (h, w) = TOY;
    fmap(1, h, w, x.data().iter().map(|&v| theta * v).collect())
}

fn scalar(v: f32) -> Tensor {
    Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
}

fn grad_of(grads: &space_core::graph::Gradients, id: space_core::graph::NodeId) -> f64 {
    grads.get(id).map(|g| g.data()[0] as f64).unwrap_or(0.0)
}

fn exactly_zero(grads: &space_core::graph::Gradients, id: space_core::graph::NodeId) -> bool {
    grads.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
}

/// A criterion value in the widest gap of `values`, so masks do not flip
/// under small parameter perturbations.
fn gap_threshold(values: &[f32]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = (0.0, v[0] / 2.0);
    for p in v.windows(2) {
        if p[1] - p[0] > best.0 {
            best = (p[1] - p[0], (p[0] + p[1]) / 2.0);
        }
    }
    best.1
}

fn fd_agrees(ad: f64, fd: f64) -> bool {
    (ad - fd).abs() <= 1e-4 * ad.abs().max(fd.abs()).max(1e-6)
}

/// (a) the original-view student output is cut inside the view-consistency
/// terms while the augmented-view branches still carry gradient.
pub fn stop_gradient_consistency(seed: u64) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_o, x_w, x_s) = (toy_input(&mut rng), toy_input(&mut rng), toy_input(&mut rng));
    let (phi, theta) = (toy_param(&mut rng, 0.5, 1.5), toy_param(&mut rng, -1.0, 1.0));
    let t = toy_forward(&x_o, phi);
    let s_w0 = toy_forward(&x_w, theta);
    let s_s0 = toy_forward(&x_s, theta);
    let f_all: Vec<f32> = [&s_w0, &s_s0]
        .iter()
        .flat_map(|s| t.values.data().iter().zip(s.values.data()).map(|(a, b)| (a - b) * (a - b)))
        .collect();
    let ups = gap_threshold(&f_all);
    let crit0 = CriterionState::constant(&[1, TOY.0, TOY.1], ups, 0.999);

    // separate leaves per branch expose where gradient flows
    let mut g = Graph::new();
    let th_o = g.param(scalar(theta));
    let th_w = g.param(scalar(theta));
    let th_s = g.param(scalar(theta));
    let branch = |g: &mut Graph, x: &Tensor, th| {
        let xi = g.constant(x.clone());
        let y = g.conv2d(xi, th, None, 1, 0).unwrap();
        g.batch_item(y, 0).unwrap()
    };
    let s_o = branch(&mut g, &x_o, th_o);
    let s_w = branch(&mut g, &x_w, th_w);
    let s_s = branch(&mut g, &x_s, th_s);
    let t_id = g.constant(t.batched());
    let mut crit = crit0.clone();
    let (nodes, inter, _) = scl_graph(&mut g, t_id, s_o, s_w, s_s, &mut crit, 1.0).map_err(|e| e.to_string())?;
    let partial = inter.m_w.data().contains(&1.0) && inter.m_w.data().contains(&0.0)
        || inter.m_s.data().contains(&1.0) && inter.m_s.data().contains(&0.0);
    ensure(partial, || format!("seed {seed}: masks are not partially active"))?;
    for (name, node) in [("l_ow", nodes.l_ow), ("l_os", nodes.l_os)] {
        let grads = g.backward(node).map_err(|e| e.to_string())?;
        ensure(exactly_zero(&grads, th_o), || format!("seed {seed}: {name} reaches the original-view student"))?;
    }
    let grads = g.backward(nodes.l_ow).map_err(|e| e.to_string())?;
    let ad_w = grad_of(&grads, th_w);
    ensure(ad_w != 0.0, || format!("seed {seed}: weak branch carries no gradient"))?;

    // shared parameter: gradient equals the derivative with s_o held fixed
    let mut ad_cons = 0.0;
    for node in [nodes.l_ow, nodes.l_os, nodes.l_ws] {
        let grads = g.backward(node).map_err(|e| e.to_string())?;
        ad_cons += grad_of(&grads, th_o) + grad_of(&grads, th_w) + grad_of(&grads, th_s);
    }
    let s_o_fixed = toy_forward(&x_o, theta);
    let masks_hold = |th: f32| -> Result<bool, String> {
        let mut c = crit0.clone();
        let (_, i) = scl_losses(&t, &s_o_fixed, &toy_forward(&x_w, th), &toy_forward(&x_s, th), &mut c, 1.0)
            .map_err(|e| e.to_string())?;
        Ok(i.m_w.data() == inter.m_w.data() && i.m_s.data() == inter.m_s.data())
    };
    let Some(h) = stable_step(theta, masks_hold)? else {
        return Ok(Fd::Degenerate);
    };
    let oracle = |th: f32| {
        let ups = vec![ups; TOY.0 * TOY.1];
        scl_oracle(&t, &s_o_fixed, &toy_forward(&x_w, th), &toy_forward(&x_s, th), Some(&ups), 0.999, 1.0).0
    };
    let l_ow = |th| Ok(oracle(th)[1]);
    let l_cons = |th| Ok(oracle(th)[4] - oracle(th)[0]);
    if !resolvable(l_ow, theta, h)? || !resolvable(l_cons, theta, h)? {
        return Ok(Fd::Degenerate);
    }
    let fd_w = central(l_ow, theta, h)?;
    ensure(fd_agrees(ad_w, fd_w), || format!("seed {seed}: d l_ow/dθ autodiff {ad_w} vs central difference {fd_w}"))?;
    let fd_cons = central(l_cons, theta, h)?;
    ensure(fd_agrees(ad_cons, fd_cons), || {
        format!("seed {seed}: consistency gradient {ad_cons} vs central difference {fd_cons}")
    })?;
    Ok(Fd::Compared)
}

/// (b) the converter loss never reaches the student, while the converter
/// itself receives the finite-difference gradient.
pub fn stop_gradient_converter(seed: u64) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = toy_input(&mut rng);
    let (phi, theta, psi) = (
        toy_param(&mut rng, 0.5, 1.5),
        toy_param(&mut rng, -1.0, 1.0),
        toy_param(&mut rng, -1.0, 1.0),
    );
    let cfg = NetworkConfig {
        feature_dim: 1,
        fm_layers: 1,
        fm_kernel: 1,
        ..NetworkConfig::tiny()
    };
    let fm_params = |w: f32, b: f32| {
        let mut p = ParamSet::default();
        p.insert("conv1.weight", scalar(w));
        p.insert("conv1.bias", Tensor::new(vec![1], vec![b]).unwrap());
        p
    };
    let bias = 0.1f32;
    let ae = random_map(&mut rng, 1, TOY.0, TOY.1, 1.0);
    let t = toy_forward(&x, phi);

    let mut g = Graph::new();
    let th = g.param(scalar(theta));
    let ph = g.param(scalar(phi));
    let xi = g.constant(x.clone());
    let s = g.conv2d(xi, th, None, 1, 0).map_err(|e| e.to_string())?;
    let tn = g.conv2d(xi, ph, None, 1, 0).map_err(|e| e.to_string())?;
    let a = g.param(ae.batched());
    let fm = fm_params(psi, bias).bind(&mut g, true);
    let (nodes, _) = logical_graph(&mut g, tn, a, s, |g, v| converter_forward(&cfg, g, &fm, v), 0.0, 0.1)
        .map_err(|e| e.to_string())?;
    let grads = g.backward(nodes.l_logical).map_err(|e| e.to_string())?;
    ensure(exactly_zero(&grads, th), || format!("seed {seed}: logical loss reaches the student"))?;
    ensure(exactly_zero(&grads, ph), || format!("seed {seed}: logical loss reaches the teacher"))?;
    let grads = g.backward(nodes.l_fm).map_err(|e| e.to_string())?;
    ensure(exactly_zero(&grads, th), || format!("seed {seed}: converter loss reaches the student"))?;
    let ad_psi = grads.get(fm.ids["conv1.weight"]).map(|v| v.data()[0] as f64).unwrap_or(0.0);

    let s0 = toy_forward(&x, theta);
    // with q = 0 every location is kept, so l_fm is smooth in ψ
    let h = FD_STEPS[0];
    let l_fm = |w| Ok(logical_oracle(&t, &ae, &s0, 1, &fm_params(w, bias), 0.0, 0.1)[1]);
    let compared = resolvable(l_fm, psi, h)?;
    if compared {
        let fd_psi = central(l_fm, psi, h)?;
        ensure(ad_psi != 0.0 && fd_agrees(ad_psi, fd_psi), || {
            format!("seed {seed}: converter gradient {ad_psi} vs central difference {fd_psi}")
        })?;
    }
    // with the student input frozen the loss is flat in θ
    let frozen = |_: f32| {
        logical_losses(&t, &ae, &s0, &cfg, &fm_params(psi, bias), 0.0, 0.1)
            .map(|b| b.l_fm)
            .map_err(|e| e.to_string())
    };
    let fd_theta = (frozen(theta + h)? as f64 - frozen(theta - h)? as f64) / (2.0 * h as f64);
    ensure(fd_theta == 0.0, || format!("seed {seed}: frozen-input difference {fd_theta}"))?;
    Ok(if compared { Fd::Compared } else { Fd::Degenerate })
}

/// (c) no loss term reaches the teacher; the distillation gradient on the
/// student matches central differences.
pub fn stop_gradient_teacher(seed: u64) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_o, x_w, x_s) = (toy_input(&mut rng), toy_input(&mut rng), toy_input(&mut rng));
    let (phi, theta) = (toy_param(&mut rng, 0.5, 1.5), toy_param(&mut rng, -1.0, 1.0));
    let t = toy_forward(&x_o, phi);
    let f0: Vec<f32> = t
        .values
        .data()
        .iter()
        .zip(toy_forward(&x_o, theta).values.data())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    let crit0 = CriterionState::constant(&[1, TOY.0, TOY.1], gap_threshold(&f0), 0.999);

    let mut g = Graph::new();
    let ph = g.param(scalar(phi));
    let th = g.param(scalar(theta));
    let mut views = Vec::new();
    for x in [&x_o, &x_w, &x_s] {
        let xi = g.constant(x.clone());
        let y = g.conv2d(xi, th, None, 1, 0).map_err(|e| e.to_string())?;
        views.push(g.batch_item(y, 0).map_err(|e| e.to_string())?);
    }
    let xo = g.constant(x_o.clone());
    let tn = g.conv2d(xo, ph, None, 1, 0).map_err(|e| e.to_string())?;
    let tn = g.batch_item(tn, 0).map_err(|e| e.to_string())?;
    let mut crit = crit0.clone();
    let (nodes, inter, _) = scl_graph(&mut g, tn, views[0], views[1], views[2], &mut crit, 1.0).map_err(|e| e.to_string())?;
    for (name, node) in [
        ("l_ts", nodes.l_ts),
        ("l_ow", nodes.l_ow),
        ("l_os", nodes.l_os),
        ("l_ws", nodes.l_ws),
        ("l_structural", nodes.l_structural),
    ] {
        let grads = g.backward(node).map_err(|e| e.to_string())?;
        ensure(exactly_zero(&grads, ph), || format!("seed {seed}: {name} reaches the teacher"))?;
    }
    ensure(inter.m_o.data().contains(&1.0), || format!("seed {seed}: empty distillation mask"))?;
    let grads = g.backward(nodes.l_ts).map_err(|e| e.to_string())?;
    let ad = grad_of(&grads, th);
    let ups = crit0.upsilon.clone();
    let masks_hold = |th: f32| -> Result<bool, String> {
        let mut c = crit0.clone();
        let s = |x: &Tensor| toy_forward(x, th);
        let (_, i) = scl_losses(&t, &s(&x_o), &s(&x_w), &s(&x_s), &mut c, 1.0).map_err(|e| e.to_string())?;
        Ok(i.m_o.data() == inter.m_o.data())
    };
    let Some(h) = stable_step(theta, masks_hold)? else {
        return Ok(Fd::Degenerate);
    };
    let l_ts = |th| {
        let s = |x: &Tensor| toy_forward(x, th);
        Ok(scl_oracle(&t, &s(&x_o), &s(&x_w), &s(&x_s), Some(&ups), 0.999, 1.0).0[0])
    };
    if !resolvable(l_ts, theta, h)? {
        return Ok(Fd::Degenerate);
    }
    let fd = central(l_ts, theta, h)?;
    ensure(ad != 0.0 && fd_agrees(ad, fd), || format!("seed {seed}: d l_ts/dθ autodiff {ad} vs central difference {fd}"))?;
    Ok(Fd::Compared)
}

// ---- criterion ---------------------------------------------------------------

/// `T` constant-input updates against `f + αᵀ(Υ₀ − f)`.
pub fn criterion_recurrence(alpha: f64, steps: u32) -> Check {
    let f = Tensor::new(vec![3], vec![0.25, 1.5, 0.0]).unwrap();
    let start = [2.0, 0.5, 1.0];
    let mut c = CriterionState::constant(&[3], 0.0, alpha);
    c.upsilon = start.to_vec();
    for _ in 0..steps {
        c.update(&f).map_err(|e| e.to_string())?;
    }
    for i in 0..3 {
        let fv = f.data()[i] as f64;
        let want = fv + alpha.powi(steps as i32) * (start[i] - fv);
        ensure((c.upsilon[i] - want).abs() < 1e-6, || {
            format!("α={alpha}: element {i} is {} after {steps} steps, closed form {want}", c.upsilon[i])
        })?;
    }
    Ok(())
}

/// Υ = +∞ selects nothing for distillation and everything for consistency;
/// Υ = −∞ the reverse.
pub fn mask_limits(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (2, 3, 4);
    let m: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, c, h, w, 1.0)).collect();
    let plain = |a: &FeatureMap, b: &FeatureMap| {
        let v: Vec<f64> = a.values.data().iter().zip(b.values.data()).map(|(x, y)| sq(*x, *y)).collect();
        (v.iter().sum::<f64>() / v.len() as f64) as f32
    };
    let lambda1 = 1.0;

    let mut crit = CriterionState::constant(&[c, h, w], f64::INFINITY, 0.999);
    let (b, _) = scl_losses(&m[0], &m[1], &m[2], &m[3], &mut crit, lambda1).map_err(|e| e.to_string())?;
    ensure(b.l_ts == 0.0 && b.selected_fraction_o == 0.0, || format!("+∞: l_ts {}", b.l_ts))?;
    ensure(
        b.l_ow == plain(&m[1], &m[2]) && b.l_os == plain(&m[1], &m[3]) && b.l_ws == plain(&m[2], &m[3]),
        || format!("+∞: consistency terms are not unmasked means: {b:?}"),
    )?;
    ensure(b.selected_fraction_w == 1.0 && b.selected_fraction_s == 1.0, || "+∞: masks not full".into())?;

    let mut crit = CriterionState::constant(&[c, h, w], f64::NEG_INFINITY, 0.999);
    let (b, _) = scl_losses(&m[0], &m[1], &m[2], &m[3], &mut crit, lambda1).map_err(|e| e.to_string())?;
    ensure(b.l_ts == plain(&m[0], &m[1]), || format!("−∞: l_ts {} is not the unmasked mean", b.l_ts))?;
    ensure((b.l_ow, b.l_os, b.l_ws) == (0.0, 0.0, 0.0), || format!("−∞: consistency terms not zero: {b:?}"))?;
    ensure(b.l_structural == b.l_ts, || "−∞: structural loss differs from distillation".into())
}

// ---- schedule and defaults ---------------------------------------------------

pub fn schedule_and_defaults() -> Check {
    let run = RunConfig::default();
    let tc = &run.train;
    let l0 = space_core::config::lambda1_at(4999, tc);
    let l1 = space_core::config::lambda1_at(5000, tc);
    ensure(l0 == 0.0 && l1 == 1.0, || format!("λ1 at 4999/5000 is {l0}/{l1}"))?;
    ensure(tc.lambda1_warmup_iters == 5000, || format!("warmup {}", tc.lambda1_warmup_iters))?;
    ensure(tc.lambda2 == 0.1, || format!("λ2 default {}", tc.lambda2))?;
    ensure(tc.q_hard == 0.99, || format!("q_hard default {}", tc.q_hard))?;
    ensure(tc.alpha_ema == 0.999, || format!("α default {}", tc.alpha_ema))
}

// ---- metrics -----------------------------------------------------------------

/// `P(anomalous > normal) + ½·P(tie)` by enumerating every pair.
pub fn auroc_pairwise(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &a in anomalous {
        for &n in normal {
            if a > n {
                acc += 1.0;
            } else if a == n {
                acc += 0.5;
            }
        }
    }
    acc / (normal.len() * anomalous.len()) as f64
}

/// Scores on a coarse grid so ties are frequent.
pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..30);
    let m = rng.random_range(1..30);
    let levels = rng.random_range(2..12) as f64;
    let mut draw = |k: usize, shift: f64| -> Vec<f64> {
        (0..k).map(|_| (rng.random_range(0.0..levels) + shift).floor() / levels).collect()
    };
    let normal = draw(n, 0.0);
    let anomalous = draw(m, 1.0);
    (normal, anomalous)
}

pub fn auroc_instance(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, a) = random_scores(&mut rng);
    let got = auroc(&n, &a).map_err(|e| e.to_string())?;
    let want = auroc_pairwise(&n, &a);
    ensure(got == want, || format!("seed {seed}: AUROC {got} vs pairwise {want}"))
}

pub fn auroc_monotone_instance(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: Vec<f64> = (0..rng.random_range(2..40)).map(|_| rng.random_range(-2.0..2.0)).collect();
    let a: Vec<f64> = (0..rng.random_range(2..40)).map(|_| rng.random_range(-1.0..3.0)).collect();
    let scale = rng.random_range(0.1..3.0);
    let shift = rng.random_range(-5.0..5.0);
    let kind = seed % 3;
    let f = move |x: f64| match kind {
        0 => scale * x + shift,
        1 => (scale * x).exp(),
        _ => x * x * x + scale * x,
    };
    let base = auroc(&n, &a).map_err(|e| e.to_string())?;
    let tn: Vec<f64> = n.iter().map(|&v| f(v)).collect();
    let ta: Vec<f64> = a.iter().map(|&v| f(v)).collect();
    let moved = auroc(&tn, &ta).map_err(|e| e.to_string())?;
    ensure(base == moved, || format!("seed {seed}: AUROC {base} changed to {moved} under an increasing map"))
}

/// A 4×4 map with a two-pixel region, integrated by hand.
///
/// Region pixels score 0.9 and 0.7; one negative scores 0.8, the other
/// thirteen 0.1. With a saturation area of two pixels the curve is
/// (0, ½) → (1/14, ½) → (1/14, 1) → (1, 1), so up to FPR 0.3 the area is
/// ½·1/14 + (0.3 − 1/14) = 0.3 − 1/28. A one-pixel saturation area makes
/// the first detection enough, giving area 1 everywhere.
pub fn spro_hand_case() -> Check {
    let mut map = vec![0.1f32; 16];
    let mut region = RegionMask::empty(4, 4);
    region.data[5] = true;
    region.data[10] = true;
    map[5] = 0.9;
    map[10] = 0.7;
    map[3] = 0.8;
    let cases = [
        (2.0, 0.3, (0.3 - 1.0 / 28.0) / 0.3),
        (2.0, 0.05, 0.5),
        (1.0, 0.3, 1.0),
        (2.0, 1.0, 1.0 - 1.0 / 28.0),
    ];
    for (sat, limit, want) in cases {
        let items = [RegionItem {
            map: &map,
            regions: vec![&region],
            saturations: vec![sat],
        }];
        let got = spro_auc(&items, limit).map_err(|e| e.to_string())?;
        ensure((got - want).abs() < 1e-9, || format!("saturation {sat}, limit {limit}: {got} vs hand value {want}"))?;
    }
    Ok(())
}

// ---- scoring -----------------------------------------------------------------

pub fn random_rgb(rng: &mut ChaCha8Rng, h: u32, w: u32) -> image::RgbImage {
    image::RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

fn channel_mean_oracle(a: &FeatureMap, b: &FeatureMap) -> Vec<f64> {
    let (c, h, w) = a.dims();
    let (da, db) = (a.values.data(), b.values.data());
    let mut out = vec![0.0; h * w];
    for (p, slot) in out.iter_mut().enumerate() {
        for ch in 0..c {
            let d = da[ch * h * w + p] as f64 - db[ch * h * w + p] as f64;
            *slot += d * d;
        }
        *slot /= c as f64;
    }
    out
}

/// Bilinear upsampling with half-pixel centers and clamped edges.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let tap = |d: usize, n: usize, len: usize| {
        let p = ((d as f64 + 0.5) * len as f64 / n as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(len - 1), p - i0 as f64)
    };
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        let (y0, y1, fy) = tap(y, nh, h);
        for x in 0..nw {
            let (x0, x1, fx) = tap(x, nw, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * nw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn scoring_model(seed: u64) -> Model {
    let cfg = NetworkConfig {
        input_size: 32,
        feature_dim: 8,
        fe_bottleneck_dim: 8,
        ..NetworkConfig::tiny()
    };
    let mut nets = Networks::init(cfg, seed, seed + 1).unwrap();
    // a distinct shadow student so the converter input is checked too
    let other = Networks::init(nets.config.clone(), seed + 2, seed + 3).unwrap();
    nets.student_ema = other.student;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = (0..3)
        .map(|_| PixelImage::from_rgb8(&random_rgb(&mut rng, 32, 32)).standardize())
        .collect();
    let stats = compute_teacher_stats(&nets, &inputs).unwrap();
    Model {
        nets,
        teacher_stats: stats,
        ema_for_logical: true,
        calibration: None,
    }
}

/// Structural/logical channel means, upsampling, calibration quantiles,
/// normalization, the equal-weight total and the max score, all by loops.
pub fn scoring_algebra(seed: u64) -> Check {
    let model = scoring_model(seed);
    let nets = &model.nets;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let (h, w) = (rng.random_range(24..48u32), rng.random_range(24..48u32));
    let samples: Vec<space_core::datasets::ImageSample> = (0..3)
        .map(|i| space_core::datasets::ImageSample {
            pixels: random_rgb(&mut rng, h, w),
            identifier: format!("v{i}"),
            label: space_core::datasets::Label::Normal,
            defect_type: "good".into(),
            gt_regions: None,
            saturation_areas: None,
        })
        .collect();

    let mut pool_s = Vec::new();
    let mut pool_l = Vec::new();
    let mut oracle_maps = Vec::new();
    for s in &samples {
        let img = PixelImage::from_rgb8(&s.pixels);
        let x = img.resize(32, 32).standardize();
        let t = normalize_teacher(&teacher_forward(nets, &x).unwrap(), &model.teacher_stats).unwrap();
        let st = student_forward(nets, &x).unwrap();
        let shadow = FeatureMap::new(pdn_features(&nets.config, &nets.student_ema, &x).unwrap()).unwrap();
        let ae = encoder_features(nets, &x).unwrap();
        let conv = fm_forward(nets, &shadow).unwrap();
        let (_, fh, fw) = t.dims();
        let ms = bilinear_oracle(&channel_mean_oracle(&t, &st), fh, fw, h as usize, w as usize);
        let ml = bilinear_oracle(&channel_mean_oracle(&ae, &conv), fh, fw, h as usize, w as usize);

        let raw = raw_maps(&model, &img).map_err(|e| e.to_string())?;
        let es = max_rel_err(&raw.structural.values, &ms);
        let el = max_rel_err(&raw.logical.values, &ml);
        ensure(es < 1e-6 && el < 1e-6, || format!("seed {seed}: raw map errors {es:e} / {el:e}"))?;
        pool_s.extend(raw.structural.values.iter().map(|&v| v as f64));
        pool_l.extend(raw.logical.values.iter().map(|&v| v as f64));
        oracle_maps.push(raw);
    }

    let cs = calibrate(&model, &samples).map_err(|e| e.to_string())?;
    let want = [
        quantile_oracle(&pool_s, 0.90),
        quantile_oracle(&pool_s, 0.995),
        quantile_oracle(&pool_l, 0.90),
        quantile_oracle(&pool_l, 0.995),
    ];
    let got = [cs.structural_lo, cs.structural_hi, cs.logical_lo, cs.logical_hi];
    for (g, wv) in got.iter().zip(want) {
        ensure(close(*g, wv, 1e-6), || format!("seed {seed}: calibration {got:?} vs oracle {want:?}"))?;
    }

    let cs = CalibrationStats {
        structural_lo: want[0],
        structural_hi: want[1],
        logical_lo: want[2],
        logical_hi: want[3],
    };
    for raw in &oracle_maps {
        let scored = score_maps(raw, &cs).map_err(|e| e.to_string())?;
        let mut best = f64::NEG_INFINITY;
        for i in 0..raw.structural.values.len() {
            let ns = (raw.structural.values[i] as f64 - want[0]) / (want[1] - want[0] + 1e-9);
            let nl = (raw.logical.values[i] as f64 - want[2]) / (want[3] - want[2] + 1e-9);
            let total = 0.5 * ns + 0.5 * nl;
            best = best.max(total);
            ensure(
                close(scored.structural.values[i] as f64, ns, 1e-6)
                    && close(scored.logical.values[i] as f64, nl, 1e-6)
                    && close(scored.total.values[i] as f64, total, 1e-6),
                || format!("seed {seed}: normalized maps differ from oracle at pixel {i}"),
            )?;
        }
        let top = scored.total.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        ensure(scored.score == top, || format!("seed {seed}: score {} is not the map maximum {top}", scored.score))?;
        ensure(close(scored.score as f64, best, 1e-6), || format!("seed {seed}: score {} vs oracle {best}", scored.score))?;
    }
    Ok(())
}

/// Zeroed converter weights leave only the skip path: output equals input.
pub fn converter_zero_identity(seed: u64) -> Check {
    let mut model = scoring_model(seed);
    model.nets.fm = model.nets.fm.zeroed();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = model.nets.config.feature_shape();
    let f = random_map(&mut rng, c, h, w, 3.0);
    let out = fm_forward(&model.nets, &f).map_err(|e| e.to_string())?;
    ensure(out == f, || format!("seed {seed}: zero-weight converter changed its input"))?;
    model.nets.config.fm_layers = 0;
    model.nets.fm = ParamSet::default();
    let out = fm_forward(&model.nets, &f).map_err(|e| e.to_string())?;
    ensure(out == f, || format!("seed {seed}: layerless converter changed its input"))
}
