//! Hash models, bit-packed codes and Hamming distance.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::row_orthonormality_error;
use crate::ocp::OrdinalProjection;
use crate::optimizer::StiefelPoint;

const MODEL_MAGIC: &[u8; 4] = b"OCH1";
/// Orthonormality slack accepted when assembling a model.
const MODEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Och,
    Lsh,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Och => "OCH",
            ModelKind::Lsh => "LSH",
        }
    }

    fn tag(self) -> u32 {
        match self {
            ModelKind::Och => 0,
            ModelKind::Lsh => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Och),
            1 => Ok(ModelKind::Lsh),
            other => Err(Error::format(format!("unknown model kind {other}"))),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "och" => Ok(ModelKind::Och),
            "lsh" => Ok(ModelKind::Lsh),
            _ => Err(Error::arg(format!(
                "unknown method {s:?}; expected OCH or LSH"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear hash `x ↦ sgn(Wᵀ x)` with `W = Zᵀ V`.
///
/// For LSH, `Z` is the identity and `V` a raw Gaussian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    kind: ModelKind,
    projection: OrdinalProjection,
    v: DMatrix<f64>,
    /// Cached `d × r` composite `Zᵀ V`, stored transposed (`r × d`) so each
    /// bit's hyperplane is a contiguous row.
    w_t: Vec<f64>,
}

impl HashModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.projection.d()
    }

    pub fn d_svd(&self) -> usize {
        self.projection.d_svd()
    }

    pub fn r(&self) -> usize {
        self.v.ncols()
    }

    pub fn projection(&self) -> &OrdinalProjection {
        &self.projection
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// The `d × r` composite projection.
    pub fn w(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.r(), self.d(), &self.w_t).transpose()
    }

    fn assemble(kind: ModelKind, projection: OrdinalProjection, v: DMatrix<f64>) -> Self {
        let w = projection.z.transpose() * &v;
        let w_t = w.transpose();
        let mut flat = Vec::with_capacity(w_t.len());
        for row in w_t.row_iter() {
            flat.extend(row.iter());
        }
        Self {
            kind,
            projection,
            v,
            w_t: flat,
        }
    }

    /// `(Wᵀ x)_k` for every bit `k`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.w_t
            .chunks_exact(self.d())
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Writes the `OCH1` container: magic, four `u32` LE fields
    /// (kind, d, d_svd, r), then row-major `f64` LE `Z`, `V` and `Λ`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, d_svd, r) = (self.d(), self.d_svd(), self.r());
        let mut out = Vec::with_capacity(20 + 8 * (d_svd * d + d_svd * r + d_svd));
        out.extend_from_slice(MODEL_MAGIC);
        for field in [self.kind.tag(), d as u32, d_svd as u32, r as u32] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for m in [&self.projection.z, &self.v] {
            for row in m.row_iter() {
                for x in row.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        for x in &self.projection.eigenvalues {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path.as_ref())?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::format("not an OCH1 model file"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let kind = ModelKind::from_tag(field(0))?;
        let (d, d_svd, r) = (field(1) as usize, field(2) as usize, field(3) as usize);
        let expected = 20 + 8 * (d_svd * d + d_svd * r + d_svd);
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "model file has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut floats = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |rows: usize, cols: usize| {
            let vals: Vec<f64> = floats.by_ref().take(rows * cols).collect();
            DMatrix::from_row_slice(rows, cols, &vals)
        };
        let z = take(d_svd, d);
        let v = take(d_svd, r);
        let eigenvalues: Vec<f64> = take(1, d_svd).iter().copied().collect();
        let projection = OrdinalProjection { z, eigenvalues };
        match kind {
            ModelKind::Och => {
                let v = StiefelPoint::with_tolerance(v, MODEL_TOL)?;
                build_och_model(&projection, &v, r)
            }
            ModelKind::Lsh => {
                if d != d_svd {
                    return Err(Error::format("LSH model must have d_svd = d"));
                }
                Ok(Self::assemble(kind, projection, v))
            }
        }
    }
}

pub fn build_och_model(
    projection: &OrdinalProjection,
    v: &StiefelPoint,
    r: usize,
) -> Result<HashModel> {
    let vm = v.matrix();
    if vm.ncols() != r {
        return Err(Error::Model(format!(
            "V has {} columns but r = {r}",
            vm.ncols()
        )));
    }
    if vm.nrows() != projection.d_svd() {
        return Err(Error::Model(format!(
            "V has {} rows but Z has {}",
            vm.nrows(),
            projection.d_svd()
        )));
    }
    if projection.eigenvalues.len() != projection.d_svd() {
        return Err(Error::Model("eigenvalue count differs from d_svd".into()));
    }
    let z_err = row_orthonormality_error(&projection.z);
    if !(z_err < MODEL_TOL) {
        return Err(Error::Model(format!(
            "Z rows are not orthonormal (error {z_err:e})"
        )));
    }
    let v_err = row_orthonormality_error(vm);
    if !(v_err < MODEL_TOL) {
        return Err(Error::Model(format!(
            "V is off the manifold (error {v_err:e})"
        )));
    }
    Ok(HashModel::assemble(
        ModelKind::Och,
        projection.clone(),
        vm.clone(),
    ))
}

/// Random-projection baseline: `W` has i.i.d. standard normal entries.
pub fn build_lsh_model(d: usize, r: usize, seed: u64) -> Result<HashModel> {
    if d == 0 || r == 0 {
        return Err(Error::arg("LSH needs d >= 1 and r >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(HashModel::assemble(
        ModelKind::Lsh,
        OrdinalProjection::identity(d),
        w,
    ))
}

/// Bit-packed codes: bit `k` of a code lives in word `k / 64` at bit
/// `k % 64`; tail bits past `r` are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodes {
    n: usize,
    r: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl BinaryCodes {
    pub fn zeros(n: usize, r: usize) -> Self {
        let wpc = r.div_ceil(64);
        Self {
            n,
            r,
            words_per_code: wpc,
            words: vec![0; n * wpc],
        }
    }

    /// Packs `{0,1}` bit rows.
    pub fn from_bits(rows: &[Vec<bool>]) -> Result<Self> {
        let r = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|b| b.len() != r) {
            return Err(Error::arg("bit rows differ in length"));
        }
        let mut codes = Self::zeros(rows.len(), r);
        for (i, bits) in rows.iter().enumerate() {
            for (k, &b) in bits.iter().enumerate() {
                if b {
                    codes.words[i * codes.words_per_code + k / 64] |= 1u64 << (k % 64);
                }
            }
        }
        Ok(codes)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn bit(&self, i: usize, k: usize) -> bool {
        (self.code(i)[k / 64] >> (k % 64)) & 1 == 1
    }

    /// `±1` view of code `i`: bit `b` maps to `2b − 1`.
    pub fn signs(&self, i: usize) -> Vec<i8> {
        (0..self.r)
            .map(|k| if self.bit(i, k) { 1 } else { -1 })
            .collect()
    }

    /// Popcount Hamming distance between codes `i` and `j`.
    #[inline]
    pub fn hamming(&self, i: usize, j: usize) -> u32 {
        hamming_words(self.code(i), self.code(j))
    }

    /// Writes `(n: u32, r: u32)` LE followed by every code's `u64` LE words.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.r as u32).to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        if bytes.len() < 8 {
            return Err(Error::format("codes file shorter than its header"));
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let r = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut codes = Self::zeros(n, r);
        if bytes.len() != 8 + 8 * codes.words.len() {
            return Err(Error::format(format!(
                "codes file has {} bytes, header implies {}",
                bytes.len(),
                8 + 8 * codes.words.len()
            )));
        }
        for (dst, c) in codes.words.iter_mut().zip(bytes[8..].chunks_exact(8)) {
            *dst = u64::from_le_bytes(c.try_into().unwrap());
        }
        let tail = r % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            let wpc = codes.words_per_code;
            if (0..n).any(|i| codes.words[i * wpc + wpc - 1] & mask != 0) {
                return Err(Error::format("nonzero tail bits past r"));
            }
        }
        Ok(codes)
    }
}

#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Bit `k` of code `i` is set iff `(Wᵀ x_i)_k > 0`.
pub fn encode(model: &HashModel, points: &DataMatrix) -> Result<BinaryCodes> {
    if points.d() != model.d() && !points.is_empty() {
        return Err(Error::arg(format!(
            "points have dimension {} but the model expects {}",
            points.d(),
            model.d()
        )));
    }
    let mut codes = BinaryCodes::zeros(points.n(), model.r());
    let wpc = codes.words_per_code;
    if wpc == 0 {
        return Ok(codes);
    }
    codes
        .words
        .par_chunks_exact_mut(wpc)
        .zip(points.as_slice().par_chunks_exact(points.d().max(1)))
        .for_each(|(code, x)| {
            for (k, value) in model.project(x).into_iter().enumerate() {
                if value > 0.0 {
                    code[k / 64] |= 1u64 << (k % 64);
                }
            }
        });
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::init_stiefel;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_projection(d: usize, d_svd: usize, seed: u64) -> OrdinalProjection {
        // orthonormal rows from the same polar construction used for V
        let z = init_stiefel(d_svd, d, seed).unwrap().into_matrix();
        OrdinalProjection {
            z,
            eigenvalues: vec![1.0; d_svd],
        }
    }

    #[test]
    fn identity_model_has_identity_w() {
        let p = OrdinalProjection::identity(3);
        let v = StiefelPoint::new(DMatrix::identity(3, 3)).unwrap();
        let m = build_och_model(&p, &v, 3).unwrap();
        assert_eq!(m.w(), DMatrix::identity(3, 3));
    }

    #[test]
    fn cached_w_matches_two_step_encoding() {
        let p = random_projection(12, 4, 1);
        let v = init_stiefel(4, 10, 2).unwrap();
        let m = build_och_model(&p, &v, 10).unwrap();
        assert!((m.w() - p.z.transpose() * v.matrix()).abs().max() < 1e-12);
        let pts = crate::dataset::gen_synthetic(3, 200, 12, 0.5, 3).unwrap();
        let codes = encode(&m, &pts).unwrap();
        for i in 0..pts.n() {
            let x = nalgebra::DVector::from_column_slice(pts.row(i));
            let two_step = v.matrix().transpose() * (&p.z * x);
            for k in 0..10 {
                if two_step[k].abs() > 1e-9 {
                    assert_eq!(codes.bit(i, k), two_step[k] > 0.0);
                }
            }
        }
    }

    #[test]
    fn off_manifold_v_is_rejected() {
        let p = OrdinalProjection::identity(2);
        let mut vm = DMatrix::identity(2, 2);
        vm[(0, 0)] = 1.0 + 1e-5;
        let v = StiefelPoint::with_tolerance(vm, 1.0).unwrap();
        assert!(matches!(build_och_model(&p, &v, 2), Err(Error::Model(_))));
        let ok = StiefelPoint::new(DMatrix::identity(2, 2)).unwrap();
        assert!(build_och_model(&p, &ok, 3).is_err());
    }

    #[test]
    fn lsh_is_deterministic() {
        assert_eq!(
            build_lsh_model(8, 16, 4).unwrap(),
            build_lsh_model(8, 16, 4).unwrap()
        );
        assert_ne!(
            build_lsh_model(8, 16, 4).unwrap(),
            build_lsh_model(8, 16, 5).unwrap()
        );
        assert!(build_lsh_model(0, 4, 0).is_err());
    }

    #[test]
    fn lsh_one_dimensional_halfspace() {
        let m = build_lsh_model(1, 1, 7).unwrap();
        let w = m.w()[(0, 0)];
        let pts = DataMatrix::from_rows(&[vec![2.0], vec![-3.0], vec![0.5]]).unwrap();
        let codes = encode(&m, &pts).unwrap();
        for i in 0..3 {
            assert_eq!(codes.bit(i, 0), w * pts.row(i)[0] > 0.0);
        }
        assert_ne!(codes.bit(0, 0), codes.bit(1, 0));
    }

    #[test]
    fn encode_sign_convention() {
        let m = build_och_model(
            &OrdinalProjection::identity(2),
            &StiefelPoint::new(DMatrix::identity(2, 2)).unwrap(),
            2,
        )
        .unwrap();
        let pts = DataMatrix::from_rows(&[vec![0.0, 0.0], vec![0.5, -0.5]]).unwrap();
        let codes = encode(&m, &pts).unwrap();
        assert_eq!(codes.code(0), &[0]);
        assert!(codes.bit(1, 0) && !codes.bit(1, 1));
        let wrong = DataMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(encode(&m, &wrong).is_err());
    }

    #[test]
    fn packed_bits_match_unpacked_signs() {
        let m = build_lsh_model(9, 130, 3).unwrap();
        let pts = crate::dataset::gen_synthetic(2, 50, 9, 1.0, 8).unwrap();
        let codes = encode(&m, &pts).unwrap();
        let w = m.w();
        for i in 0..pts.n() {
            for k in 0..130 {
                let value: f64 = (0..9).map(|j| w[(j, k)] * pts.row(i)[j]).sum();
                assert_eq!(codes.bit(i, k), value > 0.0);
            }
            assert_eq!(codes.code(i)[2] >> 2, 0, "tail bits must be zero");
        }
    }

    #[test]
    fn hamming_basic_cases() {
        let r = 37;
        let a: Vec<bool> = (0..r).map(|k| k % 3 == 0).collect();
        let b: Vec<bool> = a.iter().map(|x| !x).collect();
        let codes = BinaryCodes::from_bits(&[a.clone(), b]).unwrap();
        assert_eq!(codes.hamming(0, 0), 0);
        assert_eq!(codes.hamming(0, 1), r as u32);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_projection(6, 3, 4);
        let v = init_stiefel(3, 8, 5).unwrap();
        let m = build_och_model(&p, &v, 8).unwrap();
        let path = dir.path().join("m.och");
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"OCH1");
        assert_eq!(bytes.len(), 20 + 8 * (3 * 6 + 3 * 8 + 3));
        assert_eq!(HashModel::load(&path).unwrap(), m);

        let lsh = build_lsh_model(5, 7, 1).unwrap();
        lsh.save(&path).unwrap();
        assert_eq!(HashModel::load(&path).unwrap(), lsh);

        assert!(HashModel::from_bytes(b"NOPE0000000000000000").is_err());
        assert!(HashModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn codes_file_round_trip() {
        let m = build_lsh_model(4, 70, 2).unwrap();
        let pts = crate::dataset::gen_synthetic(2, 20, 4, 1.0, 1).unwrap();
        let codes = encode(&m, &pts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        codes.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 8 + 20 * 2 * 8);
        assert_eq!(BinaryCodes::load(&path).unwrap(), codes);
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(seed: u64, r in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<bool>> = (0..3).map(|_| (0..r).map(|_| rng.random()).collect()).collect();
            let c = BinaryCodes::from_bits(&rows).unwrap();
            prop_assert_eq!(c.hamming(0, 1), c.hamming(1, 0));
            prop_assert!(c.hamming(0, 2) <= c.hamming(0, 1) + c.hamming(1, 2));
            prop_assert!(c.hamming(0, 1) as usize <= r);
            let naive = (0..r).filter(|&k| rows[0][k] != rows[1][k]).count();
            prop_assert_eq!(c.hamming(0, 1) as usize, naive);
        }

        #[test]
        fn encode_is_scale_invariant(seed: u64, scale in 1e-3f64..1e3) {
            let m = build_lsh_model(6, 40, seed).unwrap();
            let pts = crate::dataset::gen_synthetic(2, 10, 6, 1.0, seed).unwrap();
            let scaled = DataMatrix::from_flat(10, 6, pts.as_slice().iter().map(|x| x * scale).collect()).unwrap();
            let a = encode(&m, &pts).unwrap();
            let b = encode(&m, &scaled).unwrap();
            for i in 0..10 {
                let proj = m.project(pts.row(i));
                for (k, y) in proj.iter().enumerate() {
                    if y.abs() > 1e-9 {
                        prop_assert_eq!(a.bit(i, k), b.bit(i, k));
                    }
                }
            }
        }
    }
}
