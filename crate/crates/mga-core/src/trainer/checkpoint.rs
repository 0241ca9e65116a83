//! Binary checkpoint files: magic "MGAC", version, run metadata, then a
//! length-prefixed section per parameter group and optimizer moment.
//!
//! Values are stored as f64 little-endian. f32 parameters widen losslessly
//! and narrow back to identical bits, so round trips are exact in either
//! precision. The RNG needs no serialized state: sampling streams are
//! derived from (seed, epoch), both stored here.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::ata::{AtaParams, AttentionBlockParams};
use crate::error::{MgaError, Result};
use crate::fga::FgaParams;
use crate::losses::{ClassCenters, IdentityHead};
use crate::model::ModelParams;
use crate::numerics::matrix::{Matrix, Real};
use crate::trainer::adam::OptimizerState;
use crate::trainer::config::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MGAC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Number of completed epochs; training resumes at this epoch index.
    pub epoch: usize,
    pub seed: u64,
    pub config_digest: [u8; 32],
    pub model: ModelParams<T>,
    pub opt: OptimizerState<T>,
}

/// SHA-256 over the canonical JSON form of the config.
pub fn config_digest(config: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(&json));
    out
}

fn map_eof(e: std::io::Error, what: &str) -> MgaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MgaError::TruncatedFile(what.to_string())
    } else {
        MgaError::Io(e)
    }
}

fn write_section<T: Real, W: Write>(w: &mut W, name: &str, m: &Matrix<T>) -> Result<()> {
    w.write_u16::<LittleEndian>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    for &v in m.as_slice() {
        w.write_f64::<LittleEndian>(v.as_f64())?;
    }
    Ok(())
}

fn read_section<T: Real, R: Read>(r: &mut R) -> Result<(String, Matrix<T>)> {
    let name_len = r
        .read_u16::<LittleEndian>()
        .map_err(|e| map_eof(e, "section name length"))? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)
        .map_err(|e| map_eof(e, "section name"))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| MgaError::TruncatedFile("section name is not utf-8".into()))?;
    let rows = r
        .read_u32::<LittleEndian>()
        .map_err(|e| map_eof(e, "section rows"))? as usize;
    let cols = r
        .read_u32::<LittleEndian>()
        .map_err(|e| map_eof(e, "section cols"))? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::from_f64(
            r.read_f64::<LittleEndian>()
                .map_err(|e| map_eof(e, "section values"))?,
        ));
    }
    Ok((name, Matrix::from_vec(rows, cols, data)))
}

pub fn write_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(ckpt.epoch as u32)?;
    w.write_u64::<LittleEndian>(ckpt.seed)?;
    w.write_all(&ckpt.config_digest)?;
    w.write_u64::<LittleEndian>(ckpt.opt.step)?;
    w.write_f64::<LittleEndian>(ckpt.opt.beta1.as_f64())?;
    w.write_f64::<LittleEndian>(ckpt.opt.beta2.as_f64())?;
    w.write_f64::<LittleEndian>(ckpt.opt.epsilon.as_f64())?;
    w.write_f64::<LittleEndian>(ckpt.model.ata.temperature.as_f64())?;
    w.write_f64::<LittleEndian>(ckpt.model.centers.rate.as_f64())?;

    let group_names = ModelParams::<T>::group_names();
    let count = group_names.len() * 3 + 1;
    w.write_u32::<LittleEndian>(count as u32)?;
    for name in &group_names {
        write_section(&mut w, name, ckpt.model.group(name).expect("group exists"))?;
    }
    write_section(&mut w, "centers.centers", &ckpt.model.centers.centers)?;
    for name in &group_names {
        write_section(&mut w, &format!("opt.m.{}", name), &ckpt.opt.first[name])?;
    }
    for name in &group_names {
        write_section(&mut w, &format!("opt.v.{}", name), &ckpt.opt.second[name])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| map_eof(e, "magic"))?;
    if magic != MAGIC {
        return Err(MgaError::BadMagic {
            expected: MAGIC,
            got: magic,
        });
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|e| map_eof(e, "version"))?;
    if version != VERSION {
        return Err(MgaError::UnsupportedVersion(version));
    }
    let epoch = r
        .read_u32::<LittleEndian>()
        .map_err(|e| map_eof(e, "epoch"))? as usize;
    let seed = r.read_u64::<LittleEndian>().map_err(|e| map_eof(e, "seed"))?;
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest)
        .map_err(|e| map_eof(e, "config digest"))?;
    let step = r
        .read_u64::<LittleEndian>()
        .map_err(|e| map_eof(e, "optimizer step"))?;
    let beta1 = T::from_f64(r.read_f64::<LittleEndian>().map_err(|e| map_eof(e, "beta1"))?);
    let beta2 = T::from_f64(r.read_f64::<LittleEndian>().map_err(|e| map_eof(e, "beta2"))?);
    let epsilon = T::from_f64(
        r.read_f64::<LittleEndian>()
            .map_err(|e| map_eof(e, "epsilon"))?,
    );
    let temperature = T::from_f64(
        r.read_f64::<LittleEndian>()
            .map_err(|e| map_eof(e, "temperature"))?,
    );
    let rate = T::from_f64(
        r.read_f64::<LittleEndian>()
            .map_err(|e| map_eof(e, "center rate"))?,
    );

    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|e| map_eof(e, "section count"))? as usize;
    let mut sections: BTreeMap<String, Matrix<T>> = BTreeMap::new();
    for _ in 0..count {
        let (name, m) = read_section(&mut r)?;
        sections.insert(name, m);
    }
    let mut take = |name: &str| -> Result<Matrix<T>> {
        sections
            .remove(name)
            .ok_or_else(|| MgaError::TruncatedFile(format!("missing section {}", name)))
    };

    let mut fga = |prefix: &str| -> Result<FgaParams<T>> {
        Ok(FgaParams {
            centers: take(&format!("{}.centers", prefix))?,
            biases: take(&format!("{}.biases", prefix))?,
            anchors: take(&format!("{}.anchors", prefix))?,
        })
    };
    let fga_coarse = fga("fga_coarse")?;
    let fga_fine = fga("fga_fine")?;
    let mut block = |prefix: &str| -> Result<AttentionBlockParams<T>> {
        Ok(AttentionBlockParams {
            wq: take(&format!("{}.wq", prefix))?,
            wk: take(&format!("{}.wk", prefix))?,
            wv: take(&format!("{}.wv", prefix))?,
            wo: take(&format!("{}.wo", prefix))?,
            w1: take(&format!("{}.w1", prefix))?,
            w2: take(&format!("{}.w2", prefix))?,
            ln1_gain: take(&format!("{}.ln1_gain", prefix))?,
            ln1_bias: take(&format!("{}.ln1_bias", prefix))?,
            ln2_gain: take(&format!("{}.ln2_gain", prefix))?,
            ln2_bias: take(&format!("{}.ln2_bias", prefix))?,
        })
    };
    let block_pair = block("ata.block_pair")?;
    let block_c2f = block("ata.block_c2f")?;
    let model = ModelParams {
        fga_coarse,
        fga_fine,
        ata: AtaParams {
            block_pair,
            block_c2f,
            proj_coarse: take("ata.proj_coarse")?,
            proj_fine: take("ata.proj_fine")?,
            temperature,
        },
        identity: IdentityHead {
            weight: take("identity.weight")?,
            bias: take("identity.bias")?,
        },
        centers: ClassCenters {
            centers: take("centers.centers")?,
            rate,
        },
    };
    let group_names = ModelParams::<T>::group_names();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for name in &group_names {
        first.insert(name.clone(), take(&format!("opt.m.{}", name))?);
        second.insert(name.clone(), take(&format!("opt.v.{}", name))?);
    }
    Ok(Checkpoint {
        epoch,
        seed,
        config_digest,
        model,
        opt: OptimizerState {
            first,
            second,
            step,
            beta1,
            beta2,
            epsilon,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn checkpoint() -> Checkpoint<f32> {
        let config = ModelConfig::new(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model: ModelParams<f32> = ModelParams::init(&config, &mut rng).unwrap();
        let opt = OptimizerState::new(&model, 0.9, 0.999, 1e-8);
        Checkpoint {
            epoch: 12,
            seed: 42,
            config_digest: config_digest(&TrainConfig::default()),
            model,
            opt,
        }
    }

    #[test]
    fn round_trip_is_exact_and_bit_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.mgac");
        let p2 = dir.path().join("b.mgac");
        let ckpt = checkpoint();
        write_checkpoint(&p1, &ckpt).unwrap();
        let loaded: Checkpoint<f32> = read_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        write_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.mgac");
        write_checkpoint(&p, &checkpoint()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&p),
            Err(MgaError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.mgac");
        write_checkpoint(&p, &checkpoint()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&p),
            Err(MgaError::TruncatedFile(_))
        ));
    }

    #[test]
    fn config_digest_tracks_config_changes() {
        let a = config_digest(&TrainConfig::default());
        let b = config_digest(&TrainConfig::default());
        assert_eq!(a, b);
        let c = config_digest(&TrainConfig {
            base_lr: 3e-4,
            ..TrainConfig::default()
        });
        assert_ne!(a, c);
    }
}
