//! Snapshot corpus data model and its on-disk container.
//!
//! A corpus is a time-ordered array of PDE state snapshots, shape
//! `[T, spatial.., channels]`, plus grid metadata, an optional conditioning
//! scalar, and (once normalized) the per-channel affine map back to physical
//! units. The container is a single file: a fixed-size text header followed
//! by the raw little-endian `f32` payload in row-major order, so round trips
//! are bit-exact and the format stays language-neutral.

use crate::error::{KoopmanError, Result};
use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Size of the text header block. The JSON metadata is padded with newlines
/// up to this length so the payload always starts at the same offset.
const HEADER_LEN: usize = 4096;
const MAGIC: &str = "koopman-corpus";
const VERSION: u32 = 1;

/// Per-channel affine map applied by [`SnapshotCorpus::normalize`]:
/// `normalized = (x - shift) / scale`. Channels that were constant get
/// `scale = 1` and a flag instead of a degenerate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub constant: Vec<bool>,
}

impl NormParams {
    fn map_snapshot(
        &self,
        snapshot: &ArrayViewD<f32>,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> ArrayD<f32> {
        let c = self.shift.len();
        assert_eq!(
            snapshot.shape().last().copied(),
            Some(c),
            "snapshot channel axis must match the normalization table"
        );
        let mut out = snapshot.to_owned();
        let n: usize = out.len() / c;
        let mut flat = out.view_mut().into_shape_with_order((n, c)).unwrap();
        for mut row in flat.rows_mut() {
            for (ci, v) in row.iter_mut().enumerate() {
                *v = f(*v as f64, self.shift[ci], self.scale[ci]) as f32;
            }
        }
        out
    }

    /// Map one physical snapshot `[spatial.., c]` into normalized units.
    pub fn normalize_snapshot(&self, snapshot: &ArrayViewD<f32>) -> ArrayD<f32> {
        self.map_snapshot(snapshot, |v, shift, scale| (v - shift) / scale)
    }

    /// Map one normalized snapshot `[spatial.., c]` back to physical units.
    pub fn denormalize_snapshot(&self, snapshot: &ArrayViewD<f32>) -> ArrayD<f32> {
        self.map_snapshot(snapshot, |v, shift, scale| v * scale + shift)
    }
}

/// Optional scalar a corpus (and the operators learned from it) is
/// conditioned on, in problem units.
pub type Conditioning = Option<f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    shape: Vec<usize>,
    dt: f64,
    spatial_rank: usize,
    channel_names: Vec<String>,
    conditioning: Option<f64>,
    normalization: Option<NormParams>,
}

/// Time-ordered snapshots with grid and channel metadata.
#[derive(Debug, Clone)]
pub struct SnapshotCorpus {
    /// `[T, spatial.., channels]`, row-major.
    pub data: ArrayD<f32>,
    /// Time increment between stored snapshots, problem units.
    pub dt: f64,
    pub spatial_rank: usize,
    pub channel_names: Vec<String>,
    pub conditioning: Conditioning,
    pub normalization: Option<NormParams>,
}

/// A contiguous training window: the snapshot at the window start plus the
/// `n_S` snapshots that follow it, in corpus order.
#[derive(Debug, Clone)]
pub struct SequenceWindow {
    pub x0: ArrayD<f32>,
    pub targets: Vec<ArrayD<f32>>,
    pub conditioning: Conditioning,
    /// Index of `x0` in the source corpus.
    pub start: usize,
}

impl SnapshotCorpus {
    pub fn new(
        data: ArrayD<f32>,
        dt: f64,
        spatial_rank: usize,
        channel_names: Vec<String>,
        conditioning: Conditioning,
    ) -> Result<Self> {
        let corpus = SnapshotCorpus {
            data,
            dt,
            spatial_rank,
            channel_names,
            conditioning,
            normalization: None,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let shape = self.data.shape();
        if shape.len() != self.spatial_rank + 2 {
            return Err(KoopmanError::Data(format!(
                "corpus of spatial rank {} needs {} axes, got shape {:?}",
                self.spatial_rank,
                self.spatial_rank + 2,
                shape
            )));
        }
        if self.spatial_rank != 1 && self.spatial_rank != 2 {
            return Err(KoopmanError::Data(format!(
                "spatial rank must be 1 or 2, got {}",
                self.spatial_rank
            )));
        }
        if shape[0] < 2 {
            return Err(KoopmanError::Data(format!(
                "corpus needs at least 2 snapshots, got {}",
                shape[0]
            )));
        }
        if !(self.dt > 0.0) {
            return Err(KoopmanError::Data(format!("dt must be positive, got {}", self.dt)));
        }
        if self.channel_names.len() != self.channels() {
            return Err(KoopmanError::Data(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels()
            )));
        }
        if let Some(c) = self.conditioning {
            if !c.is_finite() {
                return Err(KoopmanError::Data(format!("non-finite conditioning {c}")));
            }
        }
        Ok(())
    }

    pub fn t_len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_dims(&self) -> &[usize] {
        let s = self.data.shape();
        &s[1..s.len() - 1]
    }

    pub fn channels(&self) -> usize {
        *self.data.shape().last().unwrap()
    }

    pub fn snapshot(&self, i: usize) -> ArrayViewD<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    // ---- container ----

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::Data(
                "refusing to save corpus with non-finite values".into(),
            ));
        }
        let header = Header {
            magic: MAGIC.into(),
            version: VERSION,
            shape: self.data.shape().to_vec(),
            dt: self.dt,
            spatial_rank: self.spatial_rank,
            channel_names: self.channel_names.clone(),
            conditioning: self.conditioning,
            normalization: self.normalization.clone(),
        };
        let json = serde_json::to_string(&header)
            .map_err(|e| KoopmanError::Data(format!("header serialization: {e}")))?;
        if json.len() >= HEADER_LEN {
            return Err(KoopmanError::Data(format!(
                "header metadata {} bytes exceeds the {HEADER_LEN}-byte block",
                json.len()
            )));
        }
        let mut block = vec![b'\n'; HEADER_LEN];
        block[..json.len()].copy_from_slice(json.as_bytes());

        let mut file = std::fs::File::create(path)
            .map_err(|e| KoopmanError::Data(format!("cannot create {}: {e}", path.display())))?;
        file.write_all(&block)?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.as_standard_layout().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| KoopmanError::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut block = vec![0u8; HEADER_LEN];
        file.read_exact(&mut block).map_err(|e| {
            KoopmanError::Data(format!("corrupt header in {}: {e}", path.display()))
        })?;
        let text = std::str::from_utf8(&block)
            .map_err(|_| KoopmanError::Data(format!("corrupt header in {}", path.display())))?;
        let json = text.trim_end_matches(['\n', ' ', '\0']);
        let header: Header = serde_json::from_str(json).map_err(|e| {
            KoopmanError::Data(format!("corrupt header in {}: {e}", path.display()))
        })?;
        if header.magic != MAGIC || header.version != VERSION {
            return Err(KoopmanError::Data(format!(
                "not a corpus container (magic {:?}, version {})",
                header.magic, header.version
            )));
        }
        let expect = header.shape.iter().product::<usize>() * 4;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() != expect {
            return Err(KoopmanError::Data(format!(
                "payload is {} bytes, header shape {:?} needs {}",
                payload.len(),
                header.shape,
                expect
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::Data(format!(
                "non-finite values in payload of {}",
                path.display()
            )));
        }
        let data = ArrayD::from_shape_vec(IxDyn(&header.shape), values)
            .map_err(|e| KoopmanError::Data(format!("shape mismatch: {e}")))?;
        let corpus = SnapshotCorpus {
            data,
            dt: header.dt,
            spatial_rank: header.spatial_rank,
            channel_names: header.channel_names,
            conditioning: header.conditioning,
            normalization: header.normalization,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    // ---- normalization ----

    /// Per-channel channel min/max over the whole corpus, as (min, max).
    fn channel_extents(&self) -> Vec<(f64, f64)> {
        let c = self.channels();
        let mut ext = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
        let t = self.t_len();
        let sp: usize = self.spatial_dims().iter().product();
        let flat = self
            .data
            .view()
            .into_shape_with_order((t * sp, c))
            .unwrap();
        for row in flat.rows() {
            for (ci, &v) in row.iter().enumerate() {
                let v = v as f64;
                if v < ext[ci].0 {
                    ext[ci].0 = v;
                }
                if v > ext[ci].1 {
                    ext[ci].1 = v;
                }
            }
        }
        ext
    }

    fn norm_from_extents(extents: &[(f64, f64)]) -> NormParams {
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        let mut constant = Vec::new();
        for &(lo, hi) in extents {
            if hi > lo {
                shift.push((hi + lo) / 2.0);
                scale.push((hi - lo) / 2.0);
                constant.push(false);
            } else {
                shift.push(lo);
                scale.push(1.0);
                constant.push(true);
            }
        }
        NormParams { shift, scale, constant }
    }

    fn apply_norm(&self, params: &NormParams) -> SnapshotCorpus {
        let c = self.channels();
        let mut data = self.data.clone();
        let t = self.t_len();
        let sp: usize = self.spatial_dims().iter().product();
        {
            let mut flat = data.view_mut().into_shape_with_order((t * sp, c)).unwrap();
            for mut row in flat.rows_mut() {
                for (ci, v) in row.iter_mut().enumerate() {
                    *v = ((*v as f64 - params.shift[ci]) / params.scale[ci]) as f32;
                }
            }
        }
        SnapshotCorpus {
            data,
            dt: self.dt,
            spatial_rank: self.spatial_rank,
            channel_names: self.channel_names.clone(),
            conditioning: self.conditioning,
            normalization: Some(params.clone()),
        }
    }

    /// Affine-map every channel into [-1, 1] using its min/max over the
    /// whole corpus, recording the inverse map. Constant channels map to 0
    /// and are flagged instead of dividing by zero.
    pub fn normalize(&self) -> Result<SnapshotCorpus> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::Data("cannot normalize non-finite data".into()));
        }
        let params = Self::norm_from_extents(&self.channel_extents());
        Ok(self.apply_norm(&params))
    }

    /// Normalize several corpora with shared extents so one model sees a
    /// consistent scale across conditioning values.
    pub fn normalize_joint(corpora: &[SnapshotCorpus]) -> Result<Vec<SnapshotCorpus>> {
        let first = corpora
            .first()
            .ok_or_else(|| KoopmanError::Data("no corpora to normalize".into()))?;
        let c = first.channels();
        let mut extents = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
        for corpus in corpora {
            if corpus.channels() != c {
                return Err(KoopmanError::Data(format!(
                    "channel count mismatch across corpora: {} vs {c}",
                    corpus.channels()
                )));
            }
            if corpus.data.iter().any(|v| !v.is_finite()) {
                return Err(KoopmanError::Data("cannot normalize non-finite data".into()));
            }
            for (slot, ext) in extents.iter_mut().zip(corpus.channel_extents()) {
                slot.0 = slot.0.min(ext.0);
                slot.1 = slot.1.max(ext.1);
            }
        }
        let params = Self::norm_from_extents(&extents);
        Ok(corpora.iter().map(|c| c.apply_norm(&params)).collect())
    }

    /// Invert [`normalize`](Self::normalize) using the stored map.
    pub fn denormalize(&self) -> Result<SnapshotCorpus> {
        let params = self.normalization.as_ref().ok_or_else(|| {
            KoopmanError::Data("corpus has no normalization to invert".into())
        })?;
        let c = self.channels();
        let mut data = self.data.clone();
        let t = self.t_len();
        let sp: usize = self.spatial_dims().iter().product();
        {
            let mut flat = data.view_mut().into_shape_with_order((t * sp, c)).unwrap();
            for mut row in flat.rows_mut() {
                for (ci, v) in row.iter_mut().enumerate() {
                    *v = (*v as f64 * params.scale[ci] + params.shift[ci]) as f32;
                }
            }
        }
        Ok(SnapshotCorpus {
            data,
            dt: self.dt,
            spatial_rank: self.spatial_rank,
            channel_names: self.channel_names.clone(),
            conditioning: self.conditioning,
            normalization: None,
        })
    }

    // ---- sampling ----

    /// Uniformly sample a contiguous window: `x0` at a random start, the
    /// next `n_s` snapshots as targets. Windows never wrap around the end.
    pub fn sample_window<R: Rng>(&self, n_s: usize, rng: &mut R) -> Result<SequenceWindow> {
        let t = self.t_len();
        if n_s == 0 {
            return Err(KoopmanError::Config("window length n_S must be positive".into()));
        }
        if n_s + 1 > t {
            return Err(KoopmanError::Config(format!(
                "window needs n_S + 1 = {} snapshots, corpus has {t}",
                n_s + 1
            )));
        }
        let start = rng.gen_range(0..=t - n_s - 1);
        let targets = (start + 1..=start + n_s)
            .map(|i| self.snapshot(i).to_owned())
            .collect();
        Ok(SequenceWindow {
            x0: self.snapshot(start).to_owned(),
            targets,
            conditioning: self.conditioning,
            start,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_corpus(t: usize, w: usize, c: usize) -> SnapshotCorpus {
        let data = ArrayD::from_shape_fn(IxDyn(&[t, w, c]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f32
        });
        SnapshotCorpus::new(data, 0.25, 1, (0..c).map(|i| format!("ch{i}")).collect(), None)
            .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_preserves_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ks_like.cor");
        let mut corpus = ramp_corpus(3, 16, 1);
        corpus.data[[0, 3, 0]] = 0.1f32; // value with no exact decimal form
        corpus.save(&path).unwrap();
        let loaded = SnapshotCorpus::load(&path).unwrap();
        assert_eq!(loaded.data.shape(), corpus.data.shape());
        assert_eq!(loaded.dt, 0.25);
        assert_eq!(loaded.spatial_rank, 1);
        assert_eq!(loaded.channel_names, corpus.channel_names);
        for (a, b) in corpus.data.iter().zip(loaded.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "payload must round-trip bit-exactly");
        }
    }

    #[test]
    fn conditioning_scalar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cond.cor");
        let mut corpus = ramp_corpus(2, 4, 1);
        corpus.conditioning = Some(31.0);
        corpus.save(&path).unwrap();
        let loaded = SnapshotCorpus::load(&path).unwrap();
        assert_eq!(loaded.conditioning, Some(31.0));
    }

    #[test]
    fn truncated_file_reports_corrupt_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cor");
        ramp_corpus(2, 4, 1).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..HEADER_LEN + 7]).unwrap();
        let err = SnapshotCorpus::load(&path).unwrap_err();
        assert!(matches!(err, KoopmanError::Data(_)), "got {err:?}");

        std::fs::write(&path, &bytes[..100]).unwrap();
        let err = SnapshotCorpus::load(&path).unwrap_err();
        assert!(err.to_string().contains("corrupt header"), "got {err}");
    }

    #[test]
    fn garbage_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.cor");
        std::fs::write(&path, vec![0xA5u8; HEADER_LEN + 16]).unwrap();
        let err = SnapshotCorpus::load(&path).unwrap_err();
        assert!(matches!(err, KoopmanError::Data(_)));
    }

    #[test]
    fn non_finite_payload_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = ramp_corpus(2, 4, 1);
        corpus.data[[1, 1, 0]] = f32::NAN;
        let err = corpus.save(&dir.path().join("nan.cor")).unwrap_err();
        assert!(matches!(err, KoopmanError::Data(_)));
    }

    #[test]
    fn normalize_maps_span_to_unit_interval_and_midpoint_to_zero() {
        let mut data = ArrayD::zeros(IxDyn(&[2, 3, 1]));
        for (i, v) in [0.0f32, 5.0, 10.0, 10.0, 0.0, 5.0].iter().enumerate() {
            data[[i / 3, i % 3, 0]] = *v;
        }
        let corpus = SnapshotCorpus::new(data, 1.0, 1, vec!["u".into()], None).unwrap();
        let n = corpus.normalize().unwrap();
        let vals: Vec<f32> = n.data.iter().copied().collect();
        assert_eq!(vals, vec![-1.0, 0.0, 1.0, 1.0, -1.0, 0.0]);
        let p = n.normalization.as_ref().unwrap();
        assert_eq!((p.shift[0], p.scale[0]), (5.0, 5.0));
        assert!(!p.constant[0]);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_range_data() {
        let mut data = ArrayD::zeros(IxDyn(&[2, 2, 1]));
        data[[0, 0, 0]] = -1.0;
        data[[0, 1, 0]] = 1.0;
        data[[1, 0, 0]] = 0.25;
        data[[1, 1, 0]] = -0.5;
        let corpus = SnapshotCorpus::new(data, 1.0, 1, vec!["u".into()], None).unwrap();
        let once = corpus.normalize().unwrap();
        let twice = once.normalize().unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_becomes_zero_and_is_flagged() {
        let data = ArrayD::from_elem(IxDyn(&[2, 4, 1]), 3.0f32);
        let corpus = SnapshotCorpus::new(data, 1.0, 1, vec!["u".into()], None).unwrap();
        let n = corpus.normalize().unwrap();
        assert!(n.data.iter().all(|&v| v == 0.0));
        let p = n.normalization.as_ref().unwrap();
        assert!(p.constant[0]);
        assert_eq!((p.shift[0], p.scale[0]), (3.0, 1.0));
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = ArrayD::from_shape_fn(IxDyn(&[4, 8, 2]), |_| rng.gen_range(-7.0f32..13.0));
        let corpus =
            SnapshotCorpus::new(data.clone(), 1.0, 1, vec!["u".into(), "v".into()], None).unwrap();
        let back = corpus.normalize().unwrap().denormalize().unwrap();
        for (a, b) in data.iter().zip(back.data.iter()) {
            let denom = a.abs().max(1.0);
            assert!((a - b).abs() / denom < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn joint_normalization_shares_extents_across_corpora() {
        let lo = SnapshotCorpus::new(
            ArrayD::from_elem(IxDyn(&[2, 2, 1]), 0.0f32),
            1.0,
            1,
            vec!["u".into()],
            Some(1.0),
        )
        .unwrap();
        let mut hi_data = ArrayD::from_elem(IxDyn(&[2, 2, 1]), 10.0f32);
        hi_data[[0, 0, 0]] = 2.0;
        let hi = SnapshotCorpus::new(hi_data, 1.0, 1, vec!["u".into()], Some(2.0)).unwrap();
        let both = SnapshotCorpus::normalize_joint(&[lo, hi]).unwrap();
        assert_eq!(both[0].normalization, both[1].normalization);
        assert!(both[0].data.iter().all(|&v| v == -1.0));
        assert_eq!(both[1].data[[0, 0, 0]], -0.6);
    }

    #[test]
    fn single_valid_window_is_deterministic() {
        let corpus = ramp_corpus(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = corpus.sample_window(2, &mut rng).unwrap();
        assert_eq!(w.start, 0);
        assert_eq!(w.targets.len(), 2);
        assert_eq!(w.x0, corpus.snapshot(0).to_owned());
        assert_eq!(w.targets[0], corpus.snapshot(1).to_owned());
        assert_eq!(w.targets[1], corpus.snapshot(2).to_owned());
    }

    #[test]
    fn window_equal_to_corpus_length_is_rejected() {
        let corpus = ramp_corpus(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = corpus.sample_window(3, &mut rng).unwrap_err();
        assert!(matches!(err, KoopmanError::Config(_)));
    }

    #[test]
    fn window_targets_are_the_rows_after_x0() {
        let corpus = ramp_corpus(12, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let w = corpus.sample_window(3, &mut rng).unwrap();
            assert!(w.start + 3 < 12);
            for (k, target) in w.targets.iter().enumerate() {
                assert_eq!(target, &corpus.snapshot(w.start + 1 + k).to_owned());
            }
        }
    }

    #[test]
    fn window_starts_are_uniform_by_chi_square() {
        // T = 102 with n_S = 1 gives 101 equally likely starts; the
        // chi-square statistic over 1e5 draws has 100 degrees of freedom,
        // mean 100 and std ~14, so 170 is a generous deterministic bound.
        let corpus = ramp_corpus(102, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let bins = 101usize;
        let draws = 100_000usize;
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let w = corpus.sample_window(1, &mut rng).unwrap();
            counts[w.start] += 1;
        }
        let expect = draws as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        assert!(chi2 < 170.0, "chi-square statistic {chi2} too large for uniform starts");
    }

    proptest! {
        #[test]
        fn round_trip_any_shape(
            t in 2usize..5,
            d1 in 1usize..6,
            d2 in 1usize..6,
            c in 1usize..4,
            rank in 1usize..3,
        ) {
            let shape: Vec<usize> = if rank == 1 {
                vec![t, d1, c]
            } else {
                vec![t, d1, d2, c]
            };
            let n: usize = shape.iter().product();
            let data = ArrayD::from_shape_vec(
                IxDyn(&shape),
                (0..n).map(|i| (i as f32).sin()).collect(),
            ).unwrap();
            let corpus = SnapshotCorpus::new(
                data, 0.5, rank,
                (0..c).map(|i| format!("c{i}")).collect(),
                None,
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.cor");
            corpus.save(&path).unwrap();
            let loaded = SnapshotCorpus::load(&path).unwrap();
            prop_assert_eq!(corpus.data.shape(), loaded.data.shape());
            for (a, b) in corpus.data.iter().zip(loaded.data.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
