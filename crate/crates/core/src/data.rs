//! Synthetic paired multi-modal live/attack data and the `FMVD` file format.
//!
//! Every modality image is Gaussian noise plus a square cue block at a
//! modality-specific quadrant: `+alpha` where the modality looks live,
//! `-alpha` where it shows an attack trace.
//!
//! Two cue models are available. Under [`CueMode::Conceal`] live samples
//! look live everywhere, and an attack shows its trace in each modality
//! with probability `rho` (redrawn until at least one modality shows it).
//! One modality alone is then ambiguous while all modalities together
//! determine the label. Under [`CueMode::Symmetric`] each modality's cue
//! independently equals the label with probability `rho`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{join_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMVD";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CueMode {
    Conceal,
    Symmetric,
}

impl std::str::FromStr for CueMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "conceal" => Ok(CueMode::Conceal),
            "symmetric" => Ok(CueMode::Symmetric),
            _ => Err("expected conceal or symmetric".into()),
        }
    }
}

impl std::fmt::Display for CueMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CueMode::Conceal => "conceal",
            CueMode::Symmetric => "symmetric",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Square image side.
    pub size: usize,
    pub channels: usize,
    pub modalities: Vec<Modality>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Cue strength per modality.
    pub alpha: Vec<f64>,
    /// Cue reliability per modality.
    pub rho: Vec<f64>,
    pub sigma: f64,
    pub cue_mode: CueMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 32,
            channels: 1,
            modalities: vec![Modality::Rgb, Modality::Depth],
            train: 2000,
            dev: 500,
            test: 500,
            alpha: vec![0.5, 0.5],
            rho: vec![0.8, 0.8],
            sigma: 1.0,
            cue_mode: CueMode::Conceal,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.fmvd", self.name())
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let b = self.modalities.len();
        if b == 0 {
            return bad("at least one modality is required".into());
        }
        if self.size < 4 || self.size % 4 != 0 || self.size > u16::MAX as usize {
            return bad(format!("image size {} must be a multiple of 4", self.size));
        }
        if self.channels == 0 || self.channels > u8::MAX as usize {
            return bad("channels must be in 1..=255".into());
        }
        if self.alpha.len() != b || self.rho.len() != b {
            return bad(format!("alpha and rho need one value per modality ({b})"));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        if let Some(r) = self.rho.iter().find(|r| !(0.5..=1.0).contains(*r)) {
            return bad(format!("rho {r} outside [0.5, 1]"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be finite and non-negative", self.sigma));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", self.size);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "modalities = {}", Modality::list_string(&self.modalities));
        let _ = writeln!(s, "train = {}", self.train);
        let _ = writeln!(s, "dev = {}", self.dev);
        let _ = writeln!(s, "test = {}", self.test);
        let _ = writeln!(s, "alpha = {}", join_list(&self.alpha));
        let _ = writeln!(s, "rho = {}", join_list(&self.rho));
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "cue_mode = {}", self.cue_mode);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Keys over the defaults. A single `alpha` or `rho` value applies to
    /// every modality.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        kv.take_into("image_size", &mut s.size)?;
        kv.take_into("channels", &mut s.channels)?;
        if let Some(m) = kv.take_raw("modalities") {
            s.modalities = Modality::parse_list(&m)?;
        }
        kv.take_into("train", &mut s.train)?;
        kv.take_into("dev", &mut s.dev)?;
        kv.take_into("test", &mut s.test)?;
        let b = s.modalities.len();
        let per_modality = |raw: Option<String>, default: f64| -> Result<Vec<f64>> {
            let v = match raw {
                Some(r) => parse_list(&r)?,
                None => vec![default],
            };
            Ok(if v.len() == 1 { vec![v[0]; b] } else { v })
        };
        s.alpha = per_modality(kv.take_raw("alpha"), s.alpha[0])?;
        s.rho = per_modality(kv.take_raw("rho"), s.rho[0])?;
        kv.take_into("sigma", &mut s.sigma)?;
        kv.take_into("cue_mode", &mut s.cue_mode)?;
        kv.take_into("seed", &mut s.seed)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn parse(source: &str, text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(source, text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }
}

/// `(y0, x0, side)` of a modality's cue block: a centred square of side
/// `size/4` inside quadrant `r, d, n, t` = top-left, top-right,
/// bottom-left, bottom-right.
pub fn cue_region(size: usize, m: Modality) -> (usize, usize, usize) {
    let cell = size / 2;
    let side = size / 4;
    let (qy, qx) = (m.index() / 2, m.index() % 2);
    (qy * cell + (cell - side) / 2, qx * cell + (cell - side) / 2, side)
}

/// Mean pixel value over a modality's cue block.
pub fn cue_mean(image: &Tensor, m: Modality) -> f64 {
    let (_, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (y0, x0, side) = cue_region(w, m);
    let mut sum = 0.0;
    for y in y0..y0 + side {
        let start = (y * w + x0) * c;
        sum += image.data()[start..start + side * c].iter().sum::<f64>();
    }
    sum / (side * side * c) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: u8,
    /// One `H × W × C` image per dataset modality, in dataset order.
    pub images: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<Modality>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

/// Whether each modality shows a live-looking cue.
fn draw_cues(spec: &SyntheticSpec, label: u8, rng: &mut impl Rng) -> Vec<bool> {
    match spec.cue_mode {
        CueMode::Symmetric => spec
            .rho
            .iter()
            .map(|&rho| {
                let honest = rng.random::<f64>() < rho;
                (label == 1) == honest
            })
            .collect(),
        CueMode::Conceal if label == 1 => vec![true; spec.rho.len()],
        CueMode::Conceal => loop {
            let cues: Vec<bool> = spec.rho.iter().map(|&rho| rng.random::<f64>() >= rho).collect();
            if cues.iter().any(|&live| !live) {
                break cues;
            }
        },
    }
}

fn render(spec: &SyntheticSpec, m: Modality, alpha: f64, live: bool, noise: &Normal<f64>, rng: &mut impl Rng) -> Tensor {
    let (s, c) = (spec.size, spec.channels);
    let mut data: Vec<f64> = (0..s * s * c).map(|_| noise.sample(rng)).collect();
    let (y0, x0, side) = cue_region(s, m);
    let cue = if live { alpha } else { -alpha };
    for y in y0..y0 + side {
        for v in &mut data[(y * s + x0) * c..(y * s + x0 + side) * c] {
            *v += cue;
        }
    }
    // stored as f32 on disk; round here so memory and file agree
    for v in &mut data {
        *v = *v as f32 as f64;
    }
    Tensor::new(vec![s, s, c], data).expect("consistent shape")
}

/// One split, from its own random stream.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[split as u64]);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.count(split));
    for _ in 0..spec.count(split) {
        let label = u8::from(rng.random::<bool>());
        let cues = draw_cues(spec, label, &mut rng);
        let images = spec
            .modalities
            .iter()
            .zip(&cues)
            .zip(&spec.alpha)
            .map(|((&m, &live), &alpha)| render(spec, m, alpha, live, &noise, &mut rng))
            .collect();
        samples.push(Sample { label, images });
    }
    Ok(Dataset {
        modalities: spec.modalities.clone(),
        height: spec.size,
        width: spec.size,
        channels: spec.channels,
        samples,
    })
}

/// Train, dev and test splits.
pub fn generate(spec: &SyntheticSpec) -> Result<[Dataset; 3]> {
    Ok([
        generate_split(spec, Split::Train)?,
        generate_split(spec, Split::Dev)?,
        generate_split(spec, Split::Test)?,
    ])
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn header_len(&self) -> usize {
        13 + 6 * self.modalities.len()
    }

    pub fn record_len(&self) -> usize {
        1 + self.modalities.len() * self.height * self.width * self.channels * 4
    }

    pub fn modality_index(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.samples.len()).map_err(|_| Error::Format("too many samples".into()))?;
        let mut out = Vec::with_capacity(self.header_len() + self.samples.len() * self.record_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.push(self.modalities.len() as u8);
        for m in &self.modalities {
            out.push(m.tag() as u8);
            out.extend_from_slice(&(self.height as u16).to_le_bytes());
            out.extend_from_slice(&(self.width as u16).to_le_bytes());
            out.push(self.channels as u8);
        }
        let shape = [self.height, self.width, self.channels];
        for s in &self.samples {
            out.push(s.label);
            for img in &s.images {
                if img.shape() != shape {
                    return Err(Error::mismatch("dataset save", img.shape(), &shape));
                }
                for &v in img.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 13 {
            return Err(fmt("truncated FMVD header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt("bad magic, not an FMVD file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("FMVD version {version}, expected {VERSION}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let b = bytes[12] as usize;
        if b == 0 {
            return Err(fmt("FMVD file declares no modalities"));
        }
        let header = 13 + 6 * b;
        if bytes.len() < header {
            return Err(fmt("truncated FMVD header"));
        }
        let mut modalities = Vec::with_capacity(b);
        let mut dims = None;
        for i in 0..b {
            let e = &bytes[13 + 6 * i..19 + 6 * i];
            modalities.push(Modality::from_tag(e[0] as char).map_err(|_| fmt("bad modality tag"))?);
            let d = (
                u16::from_le_bytes([e[1], e[2]]) as usize,
                u16::from_le_bytes([e[3], e[4]]) as usize,
                e[5] as usize,
            );
            if d.0 == 0 || d.1 == 0 || d.2 == 0 {
                return Err(fmt("zero image extent"));
            }
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => return Err(fmt("modalities with different image shapes")),
                _ => {}
            }
        }
        let (height, width, channels) = dims.expect("b >= 1");
        let pixels = height * width * channels;
        let record = 1 + b * pixels * 4;
        let expected = header + count * record;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "FMVD size {} bytes, header says {expected}",
                bytes.len()
            )));
        }
        let mut samples = Vec::with_capacity(count);
        for rec in bytes[header..].chunks_exact(record) {
            let label = rec[0];
            if label > 1 {
                return Err(Error::Format(format!("label {label} in FMVD record")));
            }
            let images = rec[1..]
                .chunks_exact(pixels * 4)
                .map(|raw| {
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect();
                    Tensor::new(vec![height, width, channels], data)
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { label, images });
        }
        Ok(Dataset {
            modalities,
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes the three split files plus `manifest.txt` into `dir`.
pub fn write_data_dir(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (split, ds) in Split::ALL.into_iter().zip(generate(spec)?) {
        ds.save(&dir.join(split.file_name()))?;
    }
    std::fs::write(dir.join("manifest.txt"), spec.to_text())?;
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    Dataset::load(&dir.join(split.file_name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: CueMode) -> SyntheticSpec {
        SyntheticSpec {
            train: 40,
            dev: 10,
            test: 10,
            cue_mode: mode,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn cue_regions() {
        assert_eq!(cue_region(32, Modality::Rgb), (4, 4, 8));
        assert_eq!(cue_region(32, Modality::Depth), (4, 20, 8));
        assert_eq!(cue_region(32, Modality::Nir), (20, 4, 8));
        assert_eq!(cue_region(32, Modality::Thermal), (20, 20, 8));
    }

    #[test]
    fn noiseless_cues_and_joint_determinism() {
        for mode in [CueMode::Conceal, CueMode::Symmetric] {
            let spec = SyntheticSpec {
                sigma: 0.0,
                alpha: vec![1.0, 1.0],
                ..small(mode)
            };
            let ds = generate_split(&spec, Split::Train).unwrap();
            for s in &ds.samples {
                for (img, &m) in s.images.iter().zip(&ds.modalities) {
                    assert!(cue_mean(img, m).abs() == 1.0);
                }
                if mode == CueMode::Conceal {
                    let all_live = s.images.iter().zip(&ds.modalities).all(|(i, &m)| cue_mean(i, m) > 0.0);
                    assert_eq!(all_live, s.label == 1);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_size() {
        let spec = small(CueMode::Conceal);
        let ds = generate_split(&spec, Split::Dev).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), 13 + 12 + 10 * (1 + 2 * 32 * 32 * 4));
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn format_errors() {
        let ds = generate_split(&small(CueMode::Conceal), Split::Test).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Dataset::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn deterministic_and_split_streams_differ() {
        let spec = small(CueMode::Conceal);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a[0].to_bytes().unwrap(), b[0].to_bytes().unwrap());
        assert_ne!(a[1].samples[0], a[2].samples[0]);
    }

    #[test]
    fn spec_parsing() {
        let s = SyntheticSpec::parse("t", "rho = 0.9\nalpha = 0.2,0.3\ncue_mode = symmetric\n").unwrap();
        assert_eq!(s.rho, vec![0.9, 0.9]);
        assert_eq!(s.alpha, vec![0.2, 0.3]);
        assert_eq!(s.cue_mode, CueMode::Symmetric);
        assert_eq!(SyntheticSpec::parse("t", &s.to_text()).unwrap(), s);
        assert!(SyntheticSpec::parse("t", "rho = 0.4\n").is_err());
        assert!(SyntheticSpec::parse("t", "alpha = 1.5\n").is_err());
        assert!(SyntheticSpec::parse("t", "alpha = 0.1,0.2,0.3\n").is_err());
        assert!(SyntheticSpec::parse("t", "colour = red\n").is_err());
    }
}
