//! Datasets: margin-controlled synthetic generation, MNIST idx ingestion,
//! Gaussian corruption and CSV round-trips.
//!
//! Every [`LabeledDataset`] satisfies `norm_floor ≤ ‖x_i‖₂ ≤ 1` exactly, as
//! evaluated by [`crate::linalg::norm`].

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, snap_to_unit, Matrix};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `n × d`, one sample per row.
    pub inputs: Matrix,
    /// `±1` per sample.
    pub labels: Vec<f64>,
    pub norm_floor: f64,
    pub name: String,
    /// Source digit per row, for datasets derived from MNIST.
    pub classes: Option<Vec<u8>>,
}

impl LabeledDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(inputs: Matrix, labels: Vec<f64>, norm_floor: f64, name: impl Into<String>) -> Result<Self> {
        let ds = LabeledDataset {
            inputs,
            labels,
            norm_floor,
            name: name.into(),
            classes: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Like [`LabeledDataset::new`] with the floor set to the smallest row norm.
    pub fn with_observed_floor(inputs: Matrix, labels: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        let floor = min_row_norm(&inputs);
        Self::new(inputs, labels, floor, name)
    }

    pub fn n(&self) -> usize {
        self.inputs.rows()
    }

    pub fn d(&self) -> usize {
        self.inputs.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n() {
            return Err(Error::Shape(format!("{} labels for {} samples", self.labels.len(), self.n())));
        }
        if let Some(c) = &self.classes {
            if c.len() != self.n() {
                return Err(Error::Shape(format!("{} class tags for {} samples", c.len(), self.n())));
            }
        }
        if !(self.norm_floor > 0.0) {
            return Err(Error::Dataset(format!("norm floor {} is not positive", self.norm_floor)));
        }
        for (i, (x, &y)) in self.inputs.iter_rows().zip(&self.labels).enumerate() {
            if y != 1.0 && y != -1.0 {
                return Err(Error::Label(y));
            }
            let r = norm(x);
            if !(r <= 1.0) {
                return Err(Error::Dataset(format!("sample {i} has norm {r} > 1")));
            }
            if r < self.norm_floor {
                return Err(Error::Dataset(format!(
                    "sample {i} has norm {r} below the floor {}",
                    self.norm_floor
                )));
            }
        }
        Ok(())
    }

    /// Rows `indices`, in that order; the floor is kept.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {} samples", self.n())));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Ok(LabeledDataset {
            inputs: Matrix::from_vec(indices.len(), self.d(), data)?,
            labels,
            norm_floor: self.norm_floor,
            name: name.into(),
            classes: self.classes.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        })
    }

    /// First `k` rows and the remainder.
    pub fn split_prefix(&self, k: usize) -> Result<(Self, Self)> {
        let k = k.min(self.n());
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.n()).collect();
        Ok((
            self.subset(&head, format!("{}[..{k}]", self.name))?,
            self.subset(&tail, format!("{}[{k}..]", self.name))?,
        ))
    }
}

fn min_row_norm(m: &Matrix) -> f64 {
    m.iter_rows().map(norm).fold(f64::INFINITY, f64::min)
}

fn max_row_norm(m: &Matrix) -> f64 {
    m.iter_rows().map(norm).fold(0.0, f64::max)
}

/// Divides every row by the largest row norm, then shaves ulps until the
/// largest evaluated norm is at most 1.
fn scale_into_unit_ball(m: &mut Matrix) -> Result<()> {
    let top = max_row_norm(m);
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::Dataset(format!("cannot normalise: maximum row norm is {top}")));
    }
    for v in m.as_mut_slice() {
        *v /= top;
    }
    while max_row_norm(m) > 1.0 {
        for v in m.as_mut_slice() {
            *v *= 1.0 - f64::EPSILON;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    /// Lower bound on `|x_iᵀu|/2`, in `(0, 1/2]`.
    pub target_half_margin: f64,
    pub direction_seed: u64,
    pub sample_seed: u64,
}

/// Rejection-sampling attempts per point before the reflection fallback.
pub const REJECTION_ATTEMPTS: usize = 32;

fn unit_gaussian(rng: &mut crate::rng::Rng, d: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if snap_to_unit(&mut v) {
            return v;
        }
    }
}

/// Unit-norm points labelled by a random unit direction `u`, each with
/// `y_i·x_iᵀu ≥ 2·target_half_margin`.
///
/// Points are drawn uniformly on the sphere and rejected inside the band
/// `|xᵀu| < 2γ`; after [`REJECTION_ATTEMPTS`] misses the last draw's
/// component along `u` is reflected out of the band, keeping its orthogonal
/// direction. Returns the dataset and `u`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(LabeledDataset, Vec<f64>)> {
    let gamma = spec.target_half_margin;
    if !(gamma > 0.0 && gamma <= 0.5) {
        return Err(Error::InvalidArgument(format!("target half-margin {gamma} outside (0, 1/2]")));
    }
    if spec.d < 2 {
        return Err(Error::InvalidArgument(format!("dimension {} < 2", spec.d)));
    }
    if spec.n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let d = spec.d;
    let band = 2.0 * gamma;
    let u = unit_gaussian(&mut substream(spec.direction_seed, Stream::Direction, 0), d);

    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = substream(spec.sample_seed, Stream::Samples, i as u64);
        let mut x = unit_gaussian(&mut rng, d);
        let mut c = dot(&x, &u);
        let mut attempts = 1;
        while c.abs() < band && attempts < REJECTION_ATTEMPTS {
            x = unit_gaussian(&mut rng, d);
            c = dot(&x, &u);
            attempts += 1;
        }
        if c.abs() < band {
            x = reflect_out_of_band(&x, &u, c, band);
            c = dot(&x, &u);
            if c.abs() < band {
                let s = if c < 0.0 { -1.0 } else { 1.0 };
                x = u.iter().map(|v| s * v).collect();
                c = dot(&x, &u);
            }
            if c.abs() < band {
                return Err(Error::MarginInfeasible { index: i, attempts });
            }
        }
        labels.push(if c > 0.0 { 1.0 } else { -1.0 });
        data.extend_from_slice(&x);
    }
    let inputs = Matrix::from_vec(spec.n, d, data)?;
    let ds = LabeledDataset::new(
        inputs,
        labels,
        1.0,
        format!("synth-n{}-d{}-g{}", spec.n, d, gamma),
    )?;
    Ok((ds, u))
}

// Maps |c| ∈ [0, band) monotonically onto [band, 1] and rebuilds a unit vector
// with that component along u and the original orthogonal direction.
fn reflect_out_of_band(x: &[f64], u: &[f64], c: f64, band: f64) -> Vec<f64> {
    let s = if c < 0.0 { -1.0 } else { 1.0 };
    let t = (band + (1.0 - band) * (1.0 - c.abs() / band)).min(1.0);
    let mut w: Vec<f64> = x.iter().zip(u).map(|(xi, ui)| xi - c * ui).collect();
    let wn = norm(&w);
    if wn == 0.0 || t == 1.0 {
        return u.iter().map(|v| s * v).collect();
    }
    let ortho = (1.0 - t * t).sqrt() / wn;
    for (wi, ui) in w.iter_mut().zip(u) {
        *wi = s * t * ui + ortho * *wi;
    }
    if !snap_to_unit(&mut w) {
        return u.iter().map(|v| s * v).collect();
    }
    w
}

/// `x_i + σ g_i` with i.i.d. standard normal `g_i`, rescaled into the unit
/// ball as a whole; the floor becomes the smallest resulting norm.
pub fn add_gaussian_noise(ds: &LabeledDataset, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level {sigma} must be finite and ≥ 0")));
    }
    if sigma == 0.0 {
        return Ok(ds.clone());
    }
    let d = ds.d();
    let mut inputs = ds.inputs.clone();
    for (i, row) in inputs.as_mut_slice().chunks_mut(d.max(1)).enumerate() {
        let mut rng = substream(seed, Stream::Noise, i as u64);
        for v in row {
            let g: f64 = rng.sample(StandardNormal);
            *v += sigma * g;
        }
    }
    scale_into_unit_ball(&mut inputs)?;
    let floor = min_row_norm(&inputs);
    if !(floor > 0.0) {
        return Err(Error::Dataset("a noisy sample collapsed to the zero vector".into()));
    }
    let mut out = LabeledDataset::new(inputs, ds.labels.clone(), floor, format!("{}+noise{sigma}", ds.name))?;
    out.classes = ds.classes.clone();
    Ok(out)
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(buf: &[u8], offset: usize, file: &str) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            file: file.to_string(),
            offset,
            msg: "unexpected end of header".into(),
        })
}

/// Raw idx3 image block: `(count, rows, cols, pixels)`.
pub fn parse_idx_images<'a>(buf: &'a [u8], file: &str) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(buf, 0, file)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Idx {
            file: file.into(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(buf, 4, file)? as usize;
    let rows = be_u32(buf, 8, file)? as usize;
    let cols = be_u32(buf, 12, file)? as usize;
    let need = count * rows * cols;
    let payload = &buf[16..];
    if payload.len() < need {
        return Err(Error::Idx {
            file: file.into(),
            offset: 16 + payload.len(),
            msg: format!("truncated payload: {} of {need} pixel bytes", payload.len()),
        });
    }
    Ok((count, rows, cols, &payload[..need]))
}

/// Raw idx1 label block.
pub fn parse_idx_labels<'a>(buf: &'a [u8], file: &str) -> Result<&'a [u8]> {
    let magic = be_u32(buf, 0, file)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Idx {
            file: file.into(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let count = be_u32(buf, 4, file)? as usize;
    let payload = &buf[8..];
    if payload.len() < count {
        return Err(Error::Idx {
            file: file.into(),
            offset: 8 + payload.len(),
            msg: format!("truncated payload: {} of {count} label bytes", payload.len()),
        });
    }
    Ok(&payload[..count])
}

/// Binary MNIST: digits `> 4` are `+1`, the rest `−1`.
///
/// Digits in `exclude` are dropped first, then at most `max_n` images are kept
/// in file order, and the retained set is divided by its largest norm.
pub fn load_mnist_binary(
    images_path: &Path,
    labels_path: &Path,
    exclude: &[u8],
    max_n: Option<usize>,
) -> Result<LabeledDataset> {
    let img_buf = read_bytes(images_path)?;
    let lab_buf = read_bytes(labels_path)?;
    let img_name = images_path.display().to_string();
    let lab_name = labels_path.display().to_string();
    let (count, rows, cols, pixels) = parse_idx_images(&img_buf, &img_name)?;
    let digits = parse_idx_labels(&lab_buf, &lab_name)?;
    if digits.len() != count {
        return Err(Error::Idx {
            file: lab_name,
            offset: 4,
            msg: format!("{} labels but {count} images in {img_name}", digits.len()),
        });
    }
    if let Some((i, &b)) = digits.iter().enumerate().find(|(_, &b)| b > 9) {
        return Err(Error::Idx {
            file: lab_name,
            offset: 8 + i,
            msg: format!("label byte {b} is not a digit"),
        });
    }
    let d = rows * cols;
    let cap = max_n.unwrap_or(usize::MAX);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut duplicates = 0usize;
    for (i, &digit) in digits.iter().enumerate() {
        if labels.len() >= cap {
            break;
        }
        if exclude.contains(&digit) {
            continue;
        }
        let img = &pixels[i * d..(i + 1) * d];
        if img.iter().all(|&p| p == 0) {
            return Err(Error::Dataset(format!("image {i} in {img_name} is blank")));
        }
        let mut h = DefaultHasher::new();
        img.hash(&mut h);
        if seen.insert(h.finish(), i).is_some() {
            duplicates += 1;
        }
        data.extend(img.iter().map(|&p| p as f64));
        labels.push(if digit > 4 { 1.0 } else { -1.0 });
        classes.push(digit);
    }
    if labels.is_empty() {
        return Err(Error::Dataset("no images left after filtering".into()));
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate images retained; parallel inputs leave the margin undefined");
    }
    let mut inputs = Matrix::from_vec(labels.len(), d, data)?;
    scale_into_unit_ball(&mut inputs)?;
    let floor = min_row_norm(&inputs);
    let tag = if exclude.is_empty() {
        "mnist-all".to_string()
    } else {
        let mut ex = exclude.to_vec();
        ex.sort_unstable();
        format!("mnist-no{}", ex.iter().map(u8::to_string).collect::<String>())
    };
    let mut ds = LabeledDataset::new(inputs, labels, floor, tag)?;
    ds.classes = Some(classes);
    Ok(ds)
}

/// Pairs of exactly parallel rows (`x_i = α x_j`, `α > 0` or `< 0`), found by
/// hashing each row's direction. Meant for moderate `n`.
pub fn parallel_pairs(ds: &LabeledDataset) -> Vec<(usize, usize)> {
    let mut by_dir: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut pairs = Vec::new();
    for (i, x) in ds.inputs.iter_rows().enumerate() {
        // canonical sign: first nonzero coordinate positive
        let r = norm(x);
        let lead = x.iter().find(|v| **v != 0.0).copied().unwrap_or(1.0).signum();
        let key: Vec<u64> = x.iter().map(|v| (lead * v / r).to_bits()).collect();
        if let Some(&j) = by_dir.get(&key) {
            pairs.push((j, i));
        } else {
            by_dir.insert(key, i);
        }
    }
    pairs
}

/// Writes `y,x0,...,x{d-1}` with shortest round-trip float formatting.
pub fn write_dataset_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = std::iter::once("y".to_string())
        .chain((0..ds.d()).map(|k| format!("x{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (x, y) in ds.inputs.iter_rows().zip(&ds.labels) {
        write!(w, "{y}").map_err(io)?;
        for v in x {
            write!(w, ",{v:?}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a dataset CSV written by [`write_dataset_csv`]; the floor is the
/// smallest row norm.
pub fn read_dataset_csv(path: &Path) -> Result<LabeledDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("y") || headers.len() < 2 {
        return Err(Error::Dataset(format!("{}: header must start with y,x0", path.display())));
    }
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Dataset(format!("{}: bad value in row {}, column {k}", path.display(), line + 1)))
        };
        labels.push(parse(0)?);
        for k in 1..=d {
            data.push(parse(k)?);
        }
    }
    let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::with_observed_floor(Matrix::from_vec(labels.len(), d, data)?, labels, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, d: usize, g: f64) -> SynthSpec {
        SynthSpec {
            n,
            d,
            target_half_margin: g,
            direction_seed: 5,
            sample_seed: 6,
        }
    }

    #[test]
    fn full_margin_forces_plus_minus_u() {
        for seed in 0..20 {
            let s = SynthSpec {
                sample_seed: seed,
                ..spec(1, 2, 0.5)
            };
            let (ds, u) = generate_synthetic(&s).unwrap();
            let x = ds.inputs.row(0);
            let y = ds.labels[0];
            assert!(x.iter().zip(&u).all(|(a, b)| *a == y * b), "{x:?} vs {u:?}");
        }
    }

    #[test]
    fn synthetic_margin_and_norms_hold_exactly() {
        let (ds, u) = generate_synthetic(&spec(100, 10, 0.1)).unwrap();
        for (x, y) in ds.inputs.iter_rows().zip(&ds.labels) {
            assert_eq!(norm(x), 1.0);
            assert!(y * dot(x, &u) >= 0.2);
        }
        assert_eq!(ds.norm_floor, 1.0);
        let (again, u2) = generate_synthetic(&spec(100, 10, 0.1)).unwrap();
        assert_eq!(ds, again);
        assert_eq!(u, u2);
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic(&spec(5, 1, 0.1)).is_err());
        assert!(generate_synthetic(&spec(5, 3, 0.0)).is_err());
        assert!(generate_synthetic(&spec(5, 3, 0.51)).is_err());
    }

    #[test]
    fn reflection_lands_outside_band() {
        let u = vec![1.0, 0.0, 0.0];
        for c in [0.0f64, 0.05, -0.2, 0.39] {
            let mut x = vec![c, (1.0 - c * c).sqrt(), 0.0];
            snap_to_unit(&mut x);
            let c = dot(&x, &u);
            let r = reflect_out_of_band(&x, &u, c, 0.4);
            assert!(dot(&r, &u).abs() >= 0.4, "{c}: {r:?}");
            assert!((norm(&r) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_identity_and_determinism() {
        let (ds, _) = generate_synthetic(&spec(30, 5, 0.1)).unwrap();
        assert_eq!(add_gaussian_noise(&ds, 0.0, 1).unwrap(), ds);
        let a = add_gaussian_noise(&ds, 0.5, 9).unwrap();
        let b = add_gaussian_noise(&ds, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, ds.labels);
        a.validate().unwrap();
        assert!(max_row_norm(&a.inputs) <= 1.0);
        assert!(add_gaussian_noise(&ds, -1.0, 1).is_err());
    }

    #[test]
    fn unit_ball_scaling_is_exact() {
        let mut m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.1, 0.7], vec![1e-3, 2.9]]).unwrap();
        scale_into_unit_ball(&mut m).unwrap();
        assert!(max_row_norm(&m) <= 1.0);
        assert!(max_row_norm(&m) > 1.0 - 1e-15);
    }

    #[test]
    fn parallel_pairs_detected() {
        let m = Matrix::from_rows(&[vec![0.3, 0.4], vec![0.6, 0.8], vec![-0.3, -0.4], vec![0.4, 0.3]]).unwrap();
        let ds = LabeledDataset::with_observed_floor(m, vec![1.0, 1.0, -1.0, 1.0], "p").unwrap();
        assert_eq!(parallel_pairs(&ds), vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn validate_catches_violations() {
        let m = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        assert!(LabeledDataset::new(m.clone(), vec![0.5], 0.5, "x").is_err());
        assert!(LabeledDataset::new(m.clone(), vec![1.0], 0.0, "x").is_err());
        assert!(LabeledDataset::new(m.clone(), vec![1.0], 1.0 + 1e-9, "x").is_err());
        let big = Matrix::from_rows(&[vec![1.0, 0.1]]).unwrap();
        assert!(LabeledDataset::new(big, vec![1.0], 0.5, "x").is_err());
    }

    #[test]
    fn idx_parse_errors_name_offsets() {
        let mut buf = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        buf.extend([1u8; 5]);
        match parse_idx_images(&buf, "f") {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("{other:?}"),
        }
        buf[3] = 1;
        assert!(matches!(parse_idx_images(&buf, "f"), Err(Error::Idx { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8], "l"), Err(Error::Idx { offset: 0, .. })));
    }
}
