//! Test-time recursive rollout and result artifacts.
//!
//! Evaluation runs in cycles: encode the current snapshot, advance the
//! latent state `cycle_len` steps (decoding each one), then feed the last
//! decoded snapshot through the physical-units round trip (denormalize,
//! renormalize) and re-encode it to seed the next cycle. Errors are mean
//! absolute differences against the corpus in physical units.
//!
//! The default rollout is deterministic (z = mu); a stochastic variant
//! draws latent samples and summarizes the spread of the error curves.

use crate::corpus::SnapshotCorpus;
use crate::error::{KoopmanError, Result};
use crate::latent;
use crate::networks::{to_corpus_layout, to_net_layout, ArchConfig, FwdCtx, ModelParams, Net};
use autodiff::Graph;
use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One finished rollout: predictions and matching truth in physical
/// units, with the per-step error curve.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// `[steps, spatial.., channels]`, physical units.
    pub predictions: ArrayD<f32>,
    /// Corpus snapshots 1..=steps in physical units, same shape.
    pub ground_truth: ArrayD<f32>,
    pub mae_per_step: Vec<f64>,
    pub cycle_len: usize,
    pub n_cycles: usize,
    /// Time increment between steps, problem units.
    pub dt: f64,
    pub channel_names: Vec<String>,
    pub spatial_rank: usize,
}

/// Mean absolute difference per leading-axis slice.
pub fn mae_between(pred: &ArrayD<f32>, truth: &ArrayD<f32>) -> Vec<f64> {
    assert_eq!(pred.shape(), truth.shape(), "prediction and truth extents must match");
    let steps = pred.shape()[0];
    (0..steps)
        .map(|t| {
            let p = pred.index_axis(Axis(0), t);
            let g = truth.index_axis(Axis(0), t);
            let sum: f64 = p
                .iter()
                .zip(g.iter())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum();
            sum / p.len() as f64
        })
        .collect()
}

fn resolve_conditioning(
    arch: &ArchConfig,
    corpus: &SnapshotCorpus,
    cond: Option<f64>,
) -> Result<Option<f64>> {
    if arch.conditioned {
        cond.or(corpus.conditioning).map(Some).ok_or_else(|| {
            KoopmanError::Config(
                "conditioned model needs a conditioning value (corpus or --cond)".into(),
            )
        })
    } else if cond.is_some() {
        Err(KoopmanError::Config(
            "conditioning value given but the model is unconditioned".into(),
        ))
    } else {
        Ok(None)
    }
}

/// Roll the model out for `n_cycles` cycles of `cycle_len` steps against
/// `corpus`, starting from snapshot 0. `noise` selects the latent read:
/// none decodes the mean, a generator draws one sample per step.
pub fn rollout_cycles(
    arch: &ArchConfig,
    params: &ModelParams,
    corpus: &SnapshotCorpus,
    cycle_len: usize,
    n_cycles: usize,
    cond: Option<f64>,
    mut noise: Option<&mut ChaCha8Rng>,
) -> Result<RolloutResult> {
    arch.validate()?;
    if cycle_len == 0 || n_cycles == 0 {
        return Err(KoopmanError::Config("cycle length and cycle count must be positive".into()));
    }
    let steps = cycle_len * n_cycles;
    if corpus.t_len() < steps + 1 {
        return Err(KoopmanError::Data(format!(
            "rollout of {steps} steps needs {} snapshots, corpus has {}",
            steps + 1,
            corpus.t_len()
        )));
    }
    if corpus.spatial_dims() != arch.input_shape.as_slice()
        || corpus.channels() != arch.input_channels
    {
        return Err(KoopmanError::Config(format!(
            "corpus geometry {:?} x {} does not match the model {:?} x {}",
            corpus.spatial_dims(),
            corpus.channels(),
            arch.input_shape,
            arch.input_channels
        )));
    }
    let norm = corpus.normalization.as_ref().ok_or_else(|| {
        KoopmanError::Config("evaluation corpus must carry its normalization map".into())
    })?;
    let cond = resolve_conditioning(arch, corpus, cond)?;

    let mut snap_shape = vec![];
    snap_shape.extend_from_slice(corpus.spatial_dims());
    snap_shape.push(corpus.channels());
    let mut out_shape = vec![steps];
    out_shape.extend_from_slice(&snap_shape);
    let mut predictions = ArrayD::<f32>::zeros(IxDyn(&out_shape));

    // Normalized seed for the first cycle; hand-offs replace it.
    let mut seed_norm: ArrayD<f32> = corpus.snapshot(0).to_owned();

    for cycle in 0..n_cycles {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, None);
        let net = Net::new(arch, params, &vars);
        let mut ctx = FwdCtx::eval();

        let x0 = g.constant(to_net_layout(&seed_norm.view()));
        let x0_pad = net.pad_input(&mut g, x0);
        let (mu, ls) = net.encode(&mut g, x0_pad, &mut ctx);
        let mut state = latent::graph::LatentVars { mu, log_sigma: ls };

        let mut last_norm: Option<ArrayD<f32>> = None;
        for step in 0..cycle_len {
            let packed = net.aux(&mut g, state.mu, state.log_sigma, cond, &mut ctx);
            let pair = latent::graph::unpack_pair(&mut g, packed, arch.koopman_form, arch.latent_dim);
            state = latent::graph::koopman_step(&mut g, state, pair);
            let z = match noise.as_deref_mut() {
                Some(rng) => {
                    let eps = latent::standard_normal(arch.latent_dim, rng);
                    latent::graph::sample(&mut g, state, &eps)
                }
                None => state.mu,
            };
            let dec_pad = net.decode(&mut g, z, &mut ctx);
            let dec = net.crop_output(&mut g, dec_pad);
            let norm_snap = to_corpus_layout(g.value(dec));
            let global = cycle * cycle_len + step;
            if norm_snap.iter().any(|v| !v.is_finite()) {
                return Err(KoopmanError::Numerical(format!(
                    "rollout prediction at step {} became non-finite",
                    global + 1
                )));
            }
            let phys = norm.denormalize_snapshot(&norm_snap.view());
            predictions
                .index_axis_mut(Axis(0), global)
                .assign(&phys);
            last_norm = Some(norm_snap);
        }

        // Hand-off: the cycle's last decoded snapshot goes through the
        // physical-units round trip before seeding the next encode.
        let last = last_norm.unwrap();
        let phys = norm.denormalize_snapshot(&last.view());
        seed_norm = norm.normalize_snapshot(&phys.view());
    }

    let mut gt_shape = vec![steps];
    gt_shape.extend_from_slice(&snap_shape);
    let mut ground_truth = ArrayD::<f32>::zeros(IxDyn(&gt_shape));
    for t in 0..steps {
        let gt_norm = corpus.snapshot(t + 1);
        ground_truth
            .index_axis_mut(Axis(0), t)
            .assign(&norm.denormalize_snapshot(&gt_norm));
    }

    let mae_per_step = mae_between(&predictions, &ground_truth);
    Ok(RolloutResult {
        predictions,
        ground_truth,
        mae_per_step,
        cycle_len,
        n_cycles,
        dt: corpus.dt,
        channel_names: corpus.channel_names.clone(),
        spatial_rank: corpus.spatial_rank,
    })
}

/// Error-curve spread over repeated sampled rollouts.
#[derive(Debug, Clone)]
pub struct StochasticMae {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Run `k` sampled rollouts (fresh latent draws each) and summarize the
/// error curves pointwise.
pub fn stochastic_mae(
    arch: &ArchConfig,
    params: &ModelParams,
    corpus: &SnapshotCorpus,
    cycle_len: usize,
    n_cycles: usize,
    cond: Option<f64>,
    k: usize,
    seed: u64,
) -> Result<StochasticMae> {
    if k < 2 {
        return Err(KoopmanError::Config(
            "stochastic evaluation needs at least 2 samples".into(),
        ));
    }
    use rand::SeedableRng;
    let steps = cycle_len * n_cycles;
    let mut mean = vec![0.0; steps];
    let mut m2 = vec![0.0; steps];
    for draw in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(draw as u64);
        let result =
            rollout_cycles(arch, params, corpus, cycle_len, n_cycles, cond, Some(&mut rng))?;
        // Welford over draws, per step.
        for (t, &x) in result.mae_per_step.iter().enumerate() {
            let delta = x - mean[t];
            mean[t] += delta / (draw + 1) as f64;
            m2[t] += delta * (x - mean[t]);
        }
    }
    let std = m2.iter().map(|&s| (s / (k - 1) as f64).sqrt()).collect();
    Ok(StochasticMae { samples: k, mean, std })
}

/// Write the two-column error table; steps are 1-based.
pub fn write_mae_table(result: &RolloutResult, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("# mean absolute error per rollout step, physical (denormalized) units\n");
    out.push_str(&format!(
        "# dt per step = {}; cycle length = {}; cycles = {}\n# columns: step mae\n",
        result.dt, result.cycle_len, result.n_cycles
    ));
    for (t, mae) in result.mae_per_step.iter().enumerate() {
        out.push_str(&format!("{} {:.12e}\n", t + 1, mae));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the sampled-rollout summary table; steps are 1-based.
pub fn write_stochastic_table(summary: &StochasticMae, dt: f64, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("# mean absolute error over sampled rollouts, physical (denormalized) units\n");
    out.push_str(&format!(
        "# dt per step = {}; samples = {}\n# columns: step mae_mean mae_std\n",
        dt, summary.samples
    ));
    for t in 0..summary.mean.len() {
        out.push_str(&format!("{} {:.12e} {:.12e}\n", t + 1, summary.mean[t], summary.std[t]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---- raster figures ----

/// Sequential field colormap (dark blue through green to yellow).
fn field_color(v: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 11] = [
        [0.267004, 0.004874, 0.329415],
        [0.282623, 0.140926, 0.457517],
        [0.253935, 0.265254, 0.529983],
        [0.206756, 0.371758, 0.553117],
        [0.163625, 0.471133, 0.558148],
        [0.127568, 0.566949, 0.550556],
        [0.134692, 0.658636, 0.517649],
        [0.266941, 0.748751, 0.440573],
        [0.477504, 0.821444, 0.318195],
        [0.741388, 0.873449, 0.149561],
        [0.993248, 0.906157, 0.143936],
    ];
    let x = v.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - i as f64;
    let mut rgb = [0u8; 3];
    for ch in 0..3 {
        let c = ANCHORS[i][ch] * (1.0 - f) + ANCHORS[i + 1][ch] * f;
        rgb[ch] = (c * 255.0).round() as u8;
    }
    rgb
}

/// Diverging colormap for signed errors: blue, white at zero, red.
fn diverging_color(v: f64) -> [u8; 3] {
    let x = v.clamp(-1.0, 1.0);
    let (lo, hi): ([f64; 3], [f64; 3]) = if x < 0.0 {
        ([59.0, 76.0, 192.0], [255.0, 255.0, 255.0])
    } else {
        ([255.0, 255.0, 255.0], [180.0, 4.0, 38.0])
    };
    let f = if x < 0.0 { x + 1.0 } else { x };
    let mut rgb = [0u8; 3];
    for ch in 0..3 {
        rgb[ch] = (lo[ch] * (1.0 - f) + hi[ch] * f).round() as u8;
    }
    rgb
}

fn finite_extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        // Flat field: center an arbitrary unit range on it.
        let mid = if lo.is_finite() { lo } else { 0.0 };
        return (mid - 0.5, mid + 0.5);
    }
    (lo, hi)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Space-time triplet for one channel of a 1D problem: three undecorated
/// panels stacked vertically (prediction, truth, signed error), each with
/// one pixel row per grid point and one pixel column per rollout step.
fn save_space_time_triplet(
    pred: &ArrayViewD<f32>,
    truth: &ArrayViewD<f32>,
    path: &Path,
) -> Result<()> {
    let (steps, nx) = (pred.shape()[0], pred.shape()[1]);
    let (lo, hi) = finite_extent(pred.iter().chain(truth.iter()).map(|&v| v as f64));
    let emax = pred
        .iter()
        .zip(truth.iter())
        .map(|(&p, &t)| (t as f64 - p as f64).abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut img = image::RgbImage::new(steps as u32, 3 * nx as u32);
    for t in 0..steps {
        for x in 0..nx {
            let p = pred[[t, x]] as f64;
            let g = truth[[t, x]] as f64;
            let c0 = field_color((p - lo) / (hi - lo));
            let c1 = field_color((g - lo) / (hi - lo));
            let c2 = diverging_color((g - p) / emax);
            img.put_pixel(t as u32, x as u32, image::Rgb(c0));
            img.put_pixel(t as u32, (nx + x) as u32, image::Rgb(c1));
            img.put_pixel(t as u32, (2 * nx + x) as u32, image::Rgb(c2));
        }
    }
    img.save(path).map_err(|e| KoopmanError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Plane triplet for one channel of a 2D problem at one step: prediction,
/// truth, and signed error side by side.
fn save_plane_triplet(
    pred: &ArrayViewD<f32>,
    truth: &ArrayViewD<f32>,
    path: &Path,
) -> Result<()> {
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let (lo, hi) = finite_extent(pred.iter().chain(truth.iter()).map(|&v| v as f64));
    let emax = pred
        .iter()
        .zip(truth.iter())
        .map(|(&p, &t)| (t as f64 - p as f64).abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut img = image::RgbImage::new(3 * w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let p = pred[[r, c]] as f64;
            let g = truth[[r, c]] as f64;
            img.put_pixel(c as u32, r as u32, image::Rgb(field_color((p - lo) / (hi - lo))));
            img.put_pixel(
                (w + c) as u32,
                r as u32,
                image::Rgb(field_color((g - lo) / (hi - lo))),
            );
            img.put_pixel(
                (2 * w + c) as u32,
                r as u32,
                image::Rgb(diverging_color((g - p) / emax)),
            );
        }
    }
    img.save(path).map_err(|e| KoopmanError::Data(format!("cannot write {}: {e}", path.display())))
}

// A 3x5 bitmap font for plot annotations; each glyph row is 3 bits,
// most significant bit leftmost.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b111, 0b100, 0b111, 0b100, 0b111],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'a' => [0b111, 0b101, 0b111, 0b101, 0b101],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        ' ' => [0, 0, 0, 0, 0],
        _ => return None,
    })
}

fn draw_text(img: &mut image::RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits & (0b100 >> rx) != 0 {
                        let (px, py) = (cx + rx as i64, y + ry as i64);
                        if px >= 0
                            && py >= 0
                            && (px as u32) < img.width()
                            && (py as u32) < img.height()
                        {
                            img.put_pixel(px as u32, py as u32, image::Rgb(color));
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = dx.abs().max(dy.abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let f = i as f64 / n as f64;
        let (x, y) = (a.0 + f * dx, a.1 + f * dy);
        let (px, py) = (x.round() as i64, y.round() as i64);
        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
            img.put_pixel(px as u32, py as u32, image::Rgb(color));
        }
    }
}

const CURVE_PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Line plot of one or more curves against 1-based step index, with a
/// small legend when more than one curve is drawn.
pub fn save_curve_plot(curves: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|(_, c)| c.is_empty()) {
        return Err(KoopmanError::Config("curve plot needs non-empty curves".into()));
    }
    let (width, height) = (900u32, 540u32);
    let (ml, mr, mt, mb) = (70i64, 15i64, 15i64, 35i64);
    let (pw, ph) = (width as i64 - ml - mr, height as i64 - mt - mb);
    let max_len = curves.iter().map(|(_, c)| c.len()).max().unwrap();
    let y_max = curves
        .iter()
        .flat_map(|(_, c)| c.iter().copied())
        .fold(f64::MIN_POSITIVE, f64::max)
        * 1.05;

    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let axis = [40, 40, 40];
    let grid = [220, 220, 220];

    // Horizontal gridlines with value labels at quarters of the range.
    for q in 0..=4 {
        let y = mt + ph - (ph * q) / 4;
        if q > 0 {
            draw_line(&mut img, (ml as f64, y as f64), ((ml + pw) as f64, y as f64), grid);
        }
        let value = y_max * q as f64 / 4.0;
        draw_text(&mut img, 4, y - 2, &format!("{value:.2e}"), axis);
    }
    // Axes.
    draw_line(&mut img, (ml as f64, mt as f64), (ml as f64, (mt + ph) as f64), axis);
    draw_line(&mut img, (ml as f64, (mt + ph) as f64), ((ml + pw) as f64, (mt + ph) as f64), axis);
    // X tick labels: first and last step.
    draw_text(&mut img, ml, mt + ph + 6, "1", axis);
    let last = format!("{max_len}");
    draw_text(
        &mut img,
        ml + pw - 4 * last.len() as i64,
        mt + ph + 6,
        &last,
        axis,
    );

    let to_xy = |step: usize, v: f64, len: usize| -> (f64, f64) {
        let fx = if len > 1 { step as f64 / (len - 1) as f64 } else { 0.0 };
        let x = ml as f64 + fx * pw as f64;
        let y = (mt + ph) as f64 - (v / y_max).clamp(0.0, 1.0) * ph as f64;
        (x, y)
    };
    for (ci, (_, curve)) in curves.iter().enumerate() {
        let color = CURVE_PALETTE[ci % CURVE_PALETTE.len()];
        for t in 1..curve.len() {
            let a = to_xy(t - 1, curve[t - 1], curve.len());
            let b = to_xy(t, curve[t], curve.len());
            draw_line(&mut img, a, b, color);
        }
    }
    if curves.len() > 1 {
        for (ci, (name, _)) in curves.iter().enumerate() {
            let color = CURVE_PALETTE[ci % CURVE_PALETTE.len()];
            let y = mt + 8 + 10 * ci as i64;
            draw_line(&mut img, ((ml + 10) as f64, y as f64), ((ml + 26) as f64, y as f64), color);
            draw_text(&mut img, ml + 30, y - 2, name, axis);
        }
    }
    img.save(path).map_err(|e| KoopmanError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Write all raster figures for one rollout into `outdir`: space-time
/// triplets per channel for 1D problems, per-channel plane triplets at
/// the requested 1-based steps for 2D problems, and the error curve.
pub fn emit_figures(result: &RolloutResult, steps: &[usize], outdir: &Path) -> Result<()> {
    std::fs::create_dir_all(outdir)?;
    let n_ch = result.channel_names.len();
    match result.spatial_rank {
        1 => {
            for (ci, name) in result.channel_names.iter().enumerate() {
                let pred = result.predictions.index_axis(Axis(2), ci);
                let truth = result.ground_truth.index_axis(Axis(2), ci);
                let path = outdir.join(format!("space_time_{}.png", sanitize(name)));
                save_space_time_triplet(&pred, &truth, &path)?;
            }
        }
        2 => {
            let total = result.mae_per_step.len();
            for &step in steps {
                if step == 0 || step > total {
                    return Err(KoopmanError::Config(format!(
                        "figure step {step} outside the rollout range 1..={total}"
                    )));
                }
                for ci in 0..n_ch {
                    let pred3 = result.predictions.index_axis(Axis(0), step - 1);
                    let truth3 = result.ground_truth.index_axis(Axis(0), step - 1);
                    let pred = pred3.index_axis(Axis(2), ci);
                    let truth = truth3.index_axis(Axis(2), ci);
                    let path = outdir.join(format!(
                        "step_{step:05}_{}.png",
                        sanitize(&result.channel_names[ci])
                    ));
                    save_plane_triplet(&pred.into_dyn(), &truth.into_dyn(), &path)?;
                }
            }
        }
        r => {
            return Err(KoopmanError::Config(format!(
                "no figure layout for spatial rank {r}"
            )))
        }
    }
    save_curve_plot(
        &[("mae".to_string(), result.mae_per_step.clone())],
        &outdir.join("mae.png"),
    )?;
    Ok(())
}

/// Predictions as a corpus container in physical units, loadable by every
/// other subcommand.
pub fn save_predictions(result: &RolloutResult, corpus: &SnapshotCorpus, path: &Path) -> Result<()> {
    let out = SnapshotCorpus::new(
        result.predictions.clone(),
        result.dt,
        result.spatial_rank,
        result.channel_names.clone(),
        corpus.conditioning,
    )?;
    out.save(path)
}

/// Full evaluation pass: deterministic rollout, tables, figures, raw
/// predictions, and optionally the sampled-rollout spread.
#[allow(clippy::too_many_arguments)]
pub fn run_evaluation(
    arch: &ArchConfig,
    params: &ModelParams,
    corpus: &SnapshotCorpus,
    cycle_len: usize,
    n_cycles: usize,
    cond: Option<f64>,
    figure_steps: &[usize],
    stochastic: Option<(usize, u64)>,
    outdir: &Path,
) -> Result<RolloutResult> {
    std::fs::create_dir_all(outdir)?;
    let result = rollout_cycles(arch, params, corpus, cycle_len, n_cycles, cond, None)?;
    write_mae_table(&result, &outdir.join("mae.txt"))?;
    emit_figures(&result, figure_steps, outdir)?;
    save_predictions(&result, corpus, &outdir.join("predictions.bin"))?;
    if let Some((k, seed)) = stochastic {
        let summary =
            stochastic_mae(arch, params, corpus, cycle_len, n_cycles, cond, k, seed)?;
        write_stochastic_table(&summary, corpus.dt, &outdir.join("mae_stochastic.txt"))?;
    }
    Ok(result)
}
