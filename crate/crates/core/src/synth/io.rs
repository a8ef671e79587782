//! Dataset manifests (TOML) and flat little-endian sample files.
//!
//! Layout of a dumped dataset:
//!
//! ```text
//! <dir>/manifest.toml
//! <dir>/<source>/train_00000.bin ...
//! <dir>/<target>/test_00000.bin ...
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_benchmark, Benchmark, DatasetConfig, DomainSpec, Image, Sample, TargetSplit};
use crate::error::{Error, Result};

const SAMPLE_MAGIC: &[u8; 4] = b"TGSM";
const SAMPLE_VERSION: u32 = 1;

/// Domain used to pretrain the backbone before it is frozen.
pub type PretrainSpec = DomainSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: DatasetConfig,
    /// Defaults to the source domain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSpec>,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
}

impl Manifest {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn pretrain_domain(&self) -> &DomainSpec {
        self.pretrain.as_ref().unwrap_or(&self.source)
    }

    pub fn build(&self) -> Result<Benchmark> {
        if let Some(p) = &self.pretrain {
            p.validate(&self.dataset)?;
        }
        let mut bench = make_benchmark(&self.source, &self.targets, &self.dataset)?;
        bench.pretrain = self.pretrain_domain().clone();
        Ok(bench)
    }
}

pub fn write_sample<W: Write>(w: &mut W, sample: &Sample, grid: usize) -> Result<()> {
    let img = &sample.image;
    w.write_all(SAMPLE_MAGIC)?;
    for v in [SAMPLE_VERSION, img.height as u32, img.width as u32, img.channels as u32, grid as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(sample.domain.len() as u32).to_le_bytes())?;
    w.write_all(sample.domain.as_bytes())?;
    for v in &img.data {
        w.write_all(&v.to_le_bytes())?;
    }
    for &l in &sample.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_sample<R: Read>(r: &mut R) -> Result<Sample> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SAMPLE_MAGIC {
        return Err(Error::Dataset("not a sample file".into()));
    }
    let version = read_u32(r)?;
    if version != SAMPLE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SAMPLE_VERSION,
        });
    }
    let (h, w, c, g) = (
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
    );
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let domain = String::from_utf8(name).map_err(|_| Error::Dataset("domain name is not UTF-8".into()))?;
    let mut image = Image::new(h, w, c);
    let mut b8 = [0u8; 8];
    for v in image.data.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    let labels = (0..g * g).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
    Ok(Sample { image, labels, domain })
}

fn write_split(dir: &Path, prefix: &str, samples: &[Sample], grid: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("{prefix}_{i:05}.bin")))?);
        write_sample(&mut f, s, grid)?;
        f.flush()?;
    }
    Ok(())
}

fn read_split(dir: &Path, prefix: &str, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let path = dir.join(format!("{prefix}_{i:05}.bin"));
            let mut f = std::io::BufReader::new(
                fs::File::open(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?,
            );
            read_sample(&mut f)
        })
        .collect()
}

/// Generates the benchmark described by `manifest` and writes it to `out`.
pub fn write_dataset(manifest: &Manifest, out: &Path) -> Result<Benchmark> {
    let bench = manifest.build()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.toml"), manifest.to_toml())?;
    let grid = manifest.dataset.grid();
    write_split(&out.join(&bench.source.name), "train", &bench.train, grid)?;
    for t in &bench.targets {
        write_split(&out.join(&t.spec.name), "test", &t.test, grid)?;
    }
    Ok(bench)
}

/// Reads a dumped dataset. `dir` may also point straight at a manifest
/// file, in which case the benchmark is regenerated from it.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Benchmark)> {
    if dir.is_file() {
        let manifest = Manifest::load(dir)?;
        let bench = manifest.build()?;
        return Ok((manifest, bench));
    }
    let manifest = Manifest::load(&dir.join("manifest.toml"))?;
    let cfg = &manifest.dataset;
    let bench = Benchmark {
        config: cfg.clone(),
        source: manifest.source.clone(),
        pretrain: manifest.pretrain_domain().clone(),
        train: read_split(&dir.join(&manifest.source.name), "train", cfg.train_count)?,
        targets: manifest
            .targets
            .iter()
            .map(|t| {
                Ok(TargetSplit {
                    spec: t.clone(),
                    test: read_split(&dir.join(&t.name), "test", cfg.test_count)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok((manifest, bench))
}
