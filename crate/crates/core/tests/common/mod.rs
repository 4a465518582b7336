#![allow(dead_code)]

//! Test-only references: an f64 re-implementation of the training forward
//! pass and a finite-difference driver.

use m3dnca::nca::{ModelConfig, NcaLayerParams};
use m3dnca::pipeline::Pyramid;
use m3dnca::rng;

pub const BN_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Trainable tensors of every level as f64, in `trainable()` order.
pub type Params64 = Vec<Vec<Vec<f64>>>;

pub fn params_f64(levels: &[NcaLayerParams]) -> Params64 {
    levels
        .iter()
        .map(|l| l.trainable().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect())
        .collect()
}

pub struct Problem<'a> {
    pub config: &'a ModelConfig,
    pub batch: Vec<&'a Pyramid>,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Patch origin per level (outer) and element (inner); level 0 is the
    /// whole coarsest grid at the origin.
    pub origins: Vec<Vec<[usize; 3]>>,
    pub gamma: f64,
    pub alpha: f64,
    pub eps: f64,
}

fn idx(e: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * e[1] + y) * e[2] + x
}

/// One training-mode update of a batch of states `s[b][ch][voxel]`.
fn step(
    s: &mut [Vec<Vec<f64>>],
    e: [usize; 3],
    p: &[Vec<f64>],
    k: usize,
    hidden: usize,
    mask: &dyn Fn(usize, [usize; 3]) -> bool,
) {
    let c = s[0].len();
    let nv = e[0] * e[1] * e[2];
    let r = (k / 2) as isize;
    let (kern, w1, b1, gamma, beta, w2, b2) = (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5], &p[6]);
    // pre-activation hidden units, [b][h][v]
    let mut hid = vec![vec![vec![0.0; nv]; hidden]; s.len()];
    for (bi, st) in s.iter().enumerate() {
        let mut x = vec![vec![0.0; nv]; 2 * c];
        for ch in 0..c {
            for z in 0..e[0] {
                for y in 0..e[1] {
                    for xx in 0..e[2] {
                        let mut acc = 0.0;
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sz, sy, sx) = (
                                        z as isize + kz as isize - r,
                                        y as isize + ky as isize - r,
                                        xx as isize + kx as isize - r,
                                    );
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= e[0] as isize || sy >= e[1] as isize || sx >= e[2] as isize {
                                        continue;
                                    }
                                    acc += kern[ch * k * k * k + (kz * k + ky) * k + kx]
                                        * st[ch][idx(e, sz as usize, sy as usize, sx as usize)];
                                }
                            }
                        }
                        x[ch][idx(e, z, y, xx)] = acc;
                    }
                }
            }
            x[c + ch] = st[ch].clone();
        }
        for j in 0..hidden {
            for v in 0..nv {
                let mut a = b1[j];
                for i in 0..2 * c {
                    a += w1[j * 2 * c + i] * x[i][v];
                }
                hid[bi][j][v] = a;
            }
        }
    }
    // batch norm over (batch, voxels) with the biased variance, then relu
    let n = (s.len() * nv) as f64;
    for j in 0..hidden {
        let mu = hid.iter().map(|h| h[j].iter().sum::<f64>()).sum::<f64>() / n;
        let var = hid.iter().map(|h| h[j].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()).sum::<f64>() / n;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for h in hid.iter_mut() {
            for v in h[j].iter_mut() {
                *v = ((*v - mu) * inv * gamma[j] + beta[j]).max(0.0);
            }
        }
    }
    for (bi, st) in s.iter_mut().enumerate() {
        for z in 0..e[0] {
            for y in 0..e[1] {
                for xx in 0..e[2] {
                    let v = idx(e, z, y, xx);
                    if !mask(bi, [z, y, xx]) {
                        continue;
                    }
                    for ch in 1..c {
                        let mut u = b2[ch];
                        for j in 0..hidden {
                            u += w2[ch * hidden + j] * hid[bi][j][v];
                        }
                        st[ch][v] += u;
                    }
                }
            }
        }
    }
}

fn crop(src: &[f32], ext: [usize; 3], o: [usize; 3], size: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                out.push(src[idx(ext, o[0] + z, o[1] + y, o[2] + x)] as f64);
            }
        }
    }
    out
}

/// Mean dice + focal loss over the batch, nearest upsampling between levels.
pub fn loss(pr: &Problem, params: &Params64) -> f64 {
    let cfg = pr.config;
    let c = cfg.channels;
    let base = pr.batch[0].levels[0].extents;
    let nv: usize = base.iter().product();
    let mut s: Vec<Vec<Vec<f64>>> = pr
        .batch
        .iter()
        .map(|p| {
            let mut st = vec![vec![0.0; nv]; c];
            st[0] = p.levels[0].image.iter().map(|&v| v as f64).collect();
            st
        })
        .collect();
    for l in 0..cfg.levels {
        if l > 0 {
            let ratio = pr.batch[0].levels[l - 1].factor / pr.batch[0].levels[l].factor;
            for (bi, p) in pr.batch.iter().enumerate() {
                let (prev, cur) = (pr.origins[l - 1][bi], pr.origins[l][bi]);
                let mut next = vec![vec![0.0; nv]; c];
                for z in 0..base[0] {
                    for y in 0..base[1] {
                        for x in 0..base[2] {
                            let g = [cur[0] + z, cur[1] + y, cur[2] + x];
                            let src = [0, 1, 2].map(|a| (g[a] / ratio - prev[a]).min(base[a] - 1));
                            for ch in 0..c {
                                next[ch][idx(base, z, y, x)] = s[bi][ch][idx(base, src[0], src[1], src[2])];
                            }
                        }
                    }
                }
                next[0] = crop(&p.levels[l].image, p.levels[l].extents, cur, base);
                s[bi] = next;
            }
        }
        let origins = &pr.origins[l];
        for t in 0..pr.steps[l] {
            let mask = |bi: usize, v: [usize; 3]| {
                let g = [0, 1, 2].map(|a| (origins[bi][a] + v[a]) as i64);
                rng::fires(pr.seeds[bi], l, t, g, cfg.fire_rate)
            };
            step(&mut s, base, &params[l], cfg.kernel_sizes[l], cfg.hidden, &mask);
        }
    }
    let last = cfg.levels - 1;
    let mut total = 0.0;
    for (bi, p) in pr.batch.iter().enumerate() {
        let target = crop(&p.levels[last].label, p.levels[last].extents, pr.origins[last][bi], base);
        let prob: Vec<f64> = s[bi][1].iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        total += dice_focal(&prob, &target, pr.gamma, pr.alpha, pr.eps);
    }
    total / pr.batch.len() as f64
}

pub fn dice_focal(p: &[f64], t: &[f64], gamma: f64, alpha: f64, eps: f64) -> f64 {
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    let spt: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let dice = 1.0 - (2.0 * spt + eps) / (sp + st + eps);
    let focal: f64 = p
        .iter()
        .zip(t)
        .map(|(&q, &t)| {
            let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -alpha * t * (1.0 - q).powf(gamma) * q.ln() - (1.0 - alpha) * (1.0 - t) * q.powf(gamma) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / p.len() as f64;
    dice + focal
}

/// `|a − n| / max(|n|, floor · max|n|)` for every pair.
pub fn relative_errors(analytic: &[f64], numeric: &[f64], floor: f64) -> Vec<f64> {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor * scale).max(f64::MIN_POSITIVE))
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 0 { 0.5 * (s[m - 1] + s[m]) } else { s[m] }
}

use m3dnca::autodiff::LossParams;
use m3dnca::nca::NcaModel;
use m3dnca::pipeline::{build_pyramid, train_step};
use m3dnca::volume::Volume;
use rand::Rng;

/// The small two-level problem used for gradient checks: `c = 4`, `h = 8`,
/// 5³ level grids, 3 steps per level, batch of two.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        scale_factor: 2,
        kernel_sizes: vec![3, 3],
        channels: 4,
        hidden: 8,
        ..ModelConfig::standard()
    }
}

pub fn ball_volume(n: usize, seed: u64) -> (Volume, Volume) {
    let mut r = rng::seeded(seed);
    let c = (n as f64 - 1.0) / 2.0;
    let mut img = Vec::new();
    let mut lab = Vec::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                let inside = d < n as f64 * 0.3;
                lab.push(if inside { 1.0 } else { 0.0 });
                img.push(if inside { 0.7 } else { 0.3 } + r.gen_range(-0.1f32..0.1));
            }
        }
    }
    (Volume::new([n; 3], img).unwrap(), Volume::new([n; 3], lab).unwrap())
}

/// Perturb every parameter so that no gradient path is blocked by the
/// zero-initialised output layer.
pub fn randomized_model(config: &ModelConfig, seed: u64) -> NcaModel {
    let mut m = NcaModel::init(config.clone(), seed).unwrap();
    let mut r = rng::seeded(seed ^ 0x5eed);
    for l in &mut m.levels {
        for v in l.dense2_weight.data_mut() {
            *v = r.gen_range(-0.4..0.4);
        }
        for v in l.dense2_bias.data_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
        for v in l.bn.gamma.data_mut() {
            *v = r.gen_range(0.6..1.4);
        }
        for v in l.bn.beta.data_mut() {
            *v = r.gen_range(-0.2..0.2);
        }
    }
    m
}

/// Analytic gradients of one training step against central differences of
/// the f64 reference loss. Returns `(analytic, numeric)` flattened.
pub fn full_gradient_check(seed: u64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let config = small_config();
    let vols = [ball_volume(10, seed), ball_volume(10, seed + 1)];
    let pyramids: Vec<Pyramid> = vols.iter().map(|(i, l)| build_pyramid(i, l, &config).unwrap()).collect();
    let batch: Vec<&Pyramid> = pyramids.iter().collect();
    let mut model = randomized_model(&config, seed);
    let params = params_f64(&model.levels);
    let steps = vec![3, 3];
    let seeds = vec![seed * 2 + 11, seed * 2 + 12];
    let lp = LossParams::default();
    let out = train_step(&batch, &mut model, &steps, lp, &seeds, &mut rng::seeded(seed)).unwrap();
    let problem = Problem {
        config: &config,
        batch,
        steps,
        seeds,
        origins: vec![vec![[0; 3]; 2], out.origins.clone()],
        gamma: lp.gamma,
        alpha: lp.alpha,
        eps: lp.eps,
    };
    let reference = loss(&problem, &params);
    assert!(
        (reference - out.loss).abs() < 1e-4 * reference.abs().max(1.0),
        "reference loss {reference} vs engine {}",
        out.loss
    );
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut p = params.clone();
    for l in 0..p.len() {
        for t in 0..p[l].len() {
            for i in 0..p[l][t].len() {
                let v = params[l][t][i];
                p[l][t][i] = v + h;
                let up = loss(&problem, &p);
                p[l][t][i] = v - h;
                let down = loss(&problem, &p);
                p[l][t][i] = v;
                numeric.push((up - down) / (2.0 * h));
                analytic.push(out.gradients[l][t].data()[i] as f64);
            }
        }
    }
    (analytic, numeric)
}
