//! Flat-file persistence: checkpoints, fitted gaussians and dataset
//! directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::archive::TensorArchive;
use crate::baselines::ClassGaussians;
use crate::datagen::{Image, LabeledSample};
use crate::error::{Error, Result};
use crate::nnet::{ModelConfig, ModelParams};

const CONFIG_ENTRY: &str = "config";
/// Dropout rates are stored in parts per million so they survive the f32
/// payload exactly.
const PPM: f64 = 1e6;

pub fn model_to_archive(params: &ModelParams) -> Result<TensorArchive> {
    let c = &params.config;
    let mut a = TensorArchive::new();
    let header = [
        c.image_height,
        c.image_width,
        c.patch_size,
        c.dim,
        c.blocks,
        c.heads,
        c.ffn_hidden,
        c.num_classes,
        (c.dropout_rate * PPM).round() as usize,
    ];
    a.push_f32(CONFIG_ENTRY, &[header.len()], header.iter().map(|&v| v as f32).collect())?;
    for (name, t) in params.tensors() {
        a.push(&name, &t.shape, &t.data)?;
    }
    Ok(a)
}

pub fn model_from_archive(a: &TensorArchive) -> Result<ModelParams> {
    let h = a.get_f64(CONFIG_ENTRY, &[9])?;
    let u = |i: usize| h[i] as usize;
    let config = ModelConfig {
        image_height: u(0),
        image_width: u(1),
        patch_size: u(2),
        dim: u(3),
        blocks: u(4),
        heads: u(5),
        ffn_hidden: u(6),
        num_classes: u(7),
        dropout_rate: h[8] / PPM,
    };
    let mut params = ModelParams::init(config, 0)?;
    for (name, t) in params.tensors_mut() {
        t.data = a.get_f64(&name, &t.shape)?;
    }
    let expected = params.tensors().len() + 1;
    if a.entries().len() != expected {
        return Err(Error::Data(format!(
            "checkpoint has {} entries, expected {expected}",
            a.entries().len()
        )));
    }
    Ok(params)
}

/// Parameters as they come back from disk (values rounded to f32).
pub fn round_trip(params: &ModelParams) -> Result<ModelParams> {
    model_from_archive(&model_to_archive(params)?)
}

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    model_to_archive(params)?.write(path)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    model_from_archive(&TensorArchive::read(path)?)
}

pub fn save_gaussians(path: &Path, g: &ClassGaussians) -> Result<()> {
    let mut a = TensorArchive::new();
    a.push("means", &[g.num_classes(), g.dim], &g.means)?;
    let cov: Vec<f64> = g.covariance.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    a.push("covariance", &[g.dim, g.dim], &cov)?;
    a.write(path)
}

pub fn load_gaussians(path: &Path) -> Result<ClassGaussians> {
    let a = TensorArchive::read(path)?;
    let means = a.get("means")?;
    let (k, d) = match means.shape[..] {
        [k, d] => (k, d),
        _ => return Err(Error::Shape("means must be a matrix".into())),
    };
    let means = a.get_f64("means", &[k, d])?;
    let cov = a.get_f64("covariance", &[d, d])?;
    ClassGaussians::from_parts(d, means, DMatrix::from_row_slice(d, d, &cov))
}

const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "gssl-dataset 1";

/// Header of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub domain: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "domain {}", self.domain);
        let _ = writeln!(s, "height {}", self.height);
        let _ = writeln!(s, "width {}", self.width);
        let _ = writeln!(s, "num_classes {}", self.num_classes);
        let _ = writeln!(s, "count {}", self.files.len());
        for f in &self.files {
            let _ = writeln!(s, "sample {f}");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            Some((n, other)) => return Err(err(n, format!("expected `{MANIFEST_HEADER}`, found `{other}`"))),
            None => return Err(err(1, "empty manifest".into())),
        }
        let mut domain = None;
        let mut nums = [None; 4];
        let mut files = Vec::new();
        let mut last = 1;
        for (n, line) in lines {
            last = n;
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| err(n, format!("expected `key value`, found `{line}`")))?;
            let slot = match key {
                "domain" => {
                    domain = Some(value.to_string());
                    continue;
                }
                "sample" => {
                    if value.contains('/') || value.contains("..") {
                        return Err(err(n, format!("sample path `{value}` leaves the directory")));
                    }
                    files.push(value.to_string());
                    continue;
                }
                "height" => 0,
                "width" => 1,
                "num_classes" => 2,
                "count" => 3,
                other => return Err(err(n, format!("unknown key `{other}`"))),
            };
            nums[slot] = Some(
                value
                    .parse::<usize>()
                    .map_err(|_| err(n, format!("`{key}` needs a non-negative integer, found `{value}`")))?,
            );
        }
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| err(last, format!("missing `{key}`")));
        let count = need(nums[3], "count")?;
        if count != files.len() {
            return Err(err(last, format!("count says {count} samples, {} listed", files.len())));
        }
        Ok(Manifest {
            domain: domain.ok_or_else(|| err(last, "missing `domain`".into()))?,
            height: need(nums[0], "height")?,
            width: need(nums[1], "width")?,
            num_classes: need(nums[2], "num_classes")?,
            files,
        })
    }
}

fn sample_to_archive(s: &LabeledSample) -> Result<TensorArchive> {
    let (h, w) = (s.image.height, s.image.width);
    let mut a = TensorArchive::new();
    a.push("image", &[h, w, 3], &s.image.data)?;
    a.push_f32("labels", &[h, w], s.labels.iter().map(|&l| f32::from(l)).collect())?;
    a.push_f32("ood_mask", &[h, w], s.ood_mask.iter().map(|&m| f32::from(u8::from(m))).collect())?;
    Ok(a)
}

fn sample_from_archive(a: &TensorArchive, h: usize, w: usize) -> Result<LabeledSample> {
    let labels = a.get_f64("labels", &[h, w])?;
    let ood = a.get_f64("ood_mask", &[h, w])?;
    Ok(LabeledSample {
        image: Image {
            height: h,
            width: w,
            data: a.get_f64("image", &[h, w, 3])?,
        },
        labels: labels.iter().map(|&l| l as u8).collect(),
        ood_mask: ood.iter().map(|&m| m != 0.0).collect(),
    })
}

/// Writes samples plus manifest into `dir`, which must be absent or empty
/// unless `overwrite` is set.
pub fn write_dataset(
    dir: &Path,
    domain: &str,
    num_classes: usize,
    samples: &[LabeledSample],
    overwrite: bool,
) -> Result<()> {
    prepare_dir(dir, overwrite)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("refusing to write an empty dataset".into()))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:06}.gssl");
        sample_to_archive(s)?.write(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        domain: domain.to_string(),
        height: first.image.height,
        width: first.image.width,
        num_classes,
        files,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<LabeledSample>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::parse(&text, &path)?;
    let samples = manifest
        .files
        .iter()
        .map(|f| sample_from_archive(&TensorArchive::read(&dir.join(f))?, manifest.height, manifest.width))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Creates `dir`; an existing non-empty directory is an error unless
/// `overwrite` is set, in which case its contents are removed first.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Usage(format!(
                    "{} exists and is not empty (pass --overwrite to replace it)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn dataset_dir(root: &Path, domain: &str, split: &str) -> PathBuf {
    root.join("data").join(domain).join(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_domain, DomainSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            dim: 8,
            blocks: 2,
            heads: 2,
            ffn_hidden: 16,
            num_classes: 3,
            dropout_rate: 0.1,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(tiny_config(), 5).unwrap();
        let once = round_trip(&p).unwrap();
        assert_eq!(once.config, p.config);
        let twice = round_trip(&once).unwrap();
        assert_eq!(once, twice);
        for (a, b) in p.flatten().iter().zip(once.flatten()) {
            assert_eq!(*a as f32, b as f32);
        }
    }

    #[test]
    fn dataset_round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DomainSpec::preset("far", 3, 1).unwrap();
        spec.height = 16;
        spec.width = 16;
        spec.patch_size = 4;
        let samples = generate_domain(&spec, 3).unwrap();
        let d = dir.path().join("far");
        write_dataset(&d, "far", 3, &samples, false).unwrap();
        let (m, back) = read_dataset(&d).unwrap();
        assert_eq!(m.files.len(), 3);
        assert_eq!(back, samples);
        assert!(matches!(write_dataset(&d, "far", 3, &samples, false), Err(Error::Usage(_))));
        write_dataset(&d, "far", 3, &samples[..1], true).unwrap();
        assert_eq!(read_dataset(&d).unwrap().1.len(), 1);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let p = Path::new("m.txt");
        let good = Manifest {
            domain: "far".into(),
            height: 8,
            width: 8,
            num_classes: 3,
            files: vec!["a".into(), "b".into()],
        };
        assert_eq!(Manifest::parse(&good.render(), p).unwrap(), good);
        let bad = good.render().replace("width 8", "width eight");
        match Manifest::parse(&bad, p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad = good.render().replace("count 2", "count 3");
        assert!(matches!(Manifest::parse(&bad, p), Err(Error::Parse { .. })));
        match Manifest::parse("gssl-dataset 1\ncolour red\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
