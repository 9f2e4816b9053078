//! Checkpoint and mask persistence. All integers and reals are
//! little-endian; every file round-trips byte-exactly through save/load.
//!
//! Mask file (`ECMK`): magic, version (u32), then for `w_in`, `w_rec`,
//! `w_out` in that order: rows (u32), cols (u32), packed rows exactly as
//! the in-memory bit layout (LSB-first, byte-padded rows).
//!
//! Probability checkpoint (`ECRC`): magic, version (u32), the network
//! config echo (13 scalars, 64-bit each, in the documented order below),
//! the exploration floor epsilon (f64), then `p_in`, `p_rec`, `p_out` as
//! rows (u32), cols (u32) and row-major f32 data.
//!
//! Dense checkpoint (`ESRC`): same layout as `ECRC` but without epsilon
//! and with dense f32 weight matrices `w_in`, `w_rec`, `w_out`.
//!
//! Config echo order: n_neurons (u64), excitatory_ratio (f64), dt_ms
//! (f64), sim_steps_per_control (u64), tau_syn_ms (f64), tau_m_ms (f64),
//! tau_out_ms (f64), obs_dim (u64), act_dim (u64), r_in (f64), r_h (f64),
//! r_out (f64), allow_self_connections (u64, 0 or 1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bits::BitMatrix;
use crate::error::{Error, Result};
use crate::es::DenseGenome;
use crate::matrix::RealMatrix;
use crate::network::{Genome, NetworkConfig};
use crate::probability::ProbabilityModel;

pub const MASK_MAGIC: &[u8; 4] = b"ECMK";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECRC";
pub const DENSE_CHECKPOINT_MAGIC: &[u8; 4] = b"ESRC";
pub const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("file is truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn check_header(r: &mut impl Read, magic: &[u8; 4], kind: &str) -> Result<()> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "not a {kind} file (magic {:?})",
            String::from_utf8_lossy(&got)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {kind} version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

fn write_dims(w: &mut impl Write, rows: usize, cols: usize) -> Result<()> {
    write_u32(w, rows as u32)?;
    write_u32(w, cols as u32)
}

fn read_dims(r: &mut impl Read) -> Result<(usize, usize)> {
    Ok((read_u32(r)? as usize, read_u32(r)? as usize))
}

fn write_bit_matrix(w: &mut impl Write, m: &BitMatrix) -> Result<()> {
    write_dims(w, m.rows(), m.cols())?;
    w.write_all(m.as_bytes())?;
    Ok(())
}

fn read_bit_matrix(r: &mut impl Read) -> Result<BitMatrix> {
    let (rows, cols) = read_dims(r)?;
    let mut bytes = vec![0u8; rows * cols.div_ceil(8)];
    read_exact(r, &mut bytes)?;
    BitMatrix::from_bytes(rows, cols, bytes)
}

fn write_real_matrix(w: &mut impl Write, m: &RealMatrix) -> Result<()> {
    write_dims(w, m.rows(), m.cols())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_real_matrix(r: &mut impl Read) -> Result<RealMatrix> {
    let (rows, cols) = read_dims(r)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 4];
    for _ in 0..rows * cols {
        read_exact(r, &mut b)?;
        data.push(f32::from_le_bytes(b));
    }
    RealMatrix::from_vec(rows, cols, data)
}

fn write_config_echo(w: &mut impl Write, cfg: &NetworkConfig) -> Result<()> {
    write_u64(w, cfg.n_neurons as u64)?;
    write_f64(w, cfg.excitatory_ratio)?;
    write_f64(w, cfg.dt_ms)?;
    write_u64(w, cfg.sim_steps_per_control as u64)?;
    write_f64(w, cfg.tau_syn_ms)?;
    write_f64(w, cfg.tau_m_ms)?;
    write_f64(w, cfg.tau_out_ms)?;
    write_u64(w, cfg.obs_dim as u64)?;
    write_u64(w, cfg.act_dim as u64)?;
    write_f64(w, cfg.r_in)?;
    write_f64(w, cfg.r_h)?;
    write_f64(w, cfg.r_out)?;
    write_u64(w, cfg.allow_self_connections as u64)?;
    Ok(())
}

fn read_config_echo(r: &mut impl Read) -> Result<NetworkConfig> {
    let cfg = NetworkConfig {
        n_neurons: read_u64(r)? as usize,
        excitatory_ratio: read_f64(r)?,
        dt_ms: read_f64(r)?,
        sim_steps_per_control: read_u64(r)? as usize,
        tau_syn_ms: read_f64(r)?,
        tau_m_ms: read_f64(r)?,
        tau_out_ms: read_f64(r)?,
        obs_dim: read_u64(r)? as usize,
        act_dim: read_u64(r)? as usize,
        r_in: read_f64(r)?,
        r_h: read_f64(r)?,
        r_out: read_f64(r)?,
        allow_self_connections: match read_u64(r)? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format(format!(
                    "allow_self_connections flag must be 0 or 1, got {other}"
                )))
            }
        },
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("config echo is invalid: {e}")))?;
    Ok(cfg)
}

/// Write to `<path>.tmp` then rename, so a crash never leaves a torn file
/// at the destination.
fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|source| Error::File {
        path: tmp.clone(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|source| {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    })?))
}

fn expect_eof(r: &mut impl Read, kind: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("trailing bytes after {kind} payload"))),
    }
}

pub fn save_mask(path: &Path, genome: &Genome) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(MASK_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_bit_matrix(w, &genome.w_in)?;
        write_bit_matrix(w, &genome.w_rec)?;
        write_bit_matrix(w, &genome.w_out)?;
        Ok(())
    })
}

pub fn load_mask(path: &Path) -> Result<Genome> {
    let mut r = open_reader(path)?;
    check_header(&mut r, MASK_MAGIC, "mask")?;
    let genome = Genome {
        w_in: read_bit_matrix(&mut r)?,
        w_rec: read_bit_matrix(&mut r)?,
        w_out: read_bit_matrix(&mut r)?,
    };
    if genome.w_rec.rows() != genome.w_rec.cols()
        || genome.w_in.rows() != genome.w_rec.rows()
        || genome.w_out.cols() != genome.w_rec.rows()
    {
        return Err(Error::Format("mask block shapes are inconsistent".into()));
    }
    expect_eof(&mut r, "mask")?;
    Ok(genome)
}

pub fn save_checkpoint(path: &Path, cfg: &NetworkConfig, model: &ProbabilityModel) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_config_echo(w, cfg)?;
        write_f64(w, model.epsilon as f64)?;
        write_real_matrix(w, &model.p_in)?;
        write_real_matrix(w, &model.p_rec)?;
        write_real_matrix(w, &model.p_out)?;
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkConfig, ProbabilityModel)> {
    let mut r = open_reader(path)?;
    check_header(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    let cfg = read_config_echo(&mut r)?;
    let epsilon = read_f64(&mut r)? as f32;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Format(format!("invalid epsilon {epsilon}")));
    }
    let model = ProbabilityModel {
        p_in: read_real_matrix(&mut r)?,
        p_rec: read_real_matrix(&mut r)?,
        p_out: read_real_matrix(&mut r)?,
        epsilon,
        allow_self_connections: cfg.allow_self_connections,
    };
    validate_block_dims(&cfg, model.p_in.rows(), model.p_in.cols(), "p_in", cfg.obs_dim)?;
    validate_block_dims(&cfg, model.p_rec.rows(), model.p_rec.cols(), "p_rec", cfg.n_neurons)?;
    if model.p_out.rows() != cfg.act_dim || model.p_out.cols() != cfg.n_neurons {
        return Err(Error::Format(format!(
            "p_out is {}x{}, config echo wants {}x{}",
            model.p_out.rows(),
            model.p_out.cols(),
            cfg.act_dim,
            cfg.n_neurons
        )));
    }
    if !(model.p_in.all_finite() && model.p_rec.all_finite() && model.p_out.all_finite()) {
        return Err(Error::Format("checkpoint holds non-finite probabilities".into()));
    }
    expect_eof(&mut r, "checkpoint")?;
    Ok((cfg, model))
}

fn validate_block_dims(
    cfg: &NetworkConfig,
    rows: usize,
    cols: usize,
    name: &str,
    want_cols: usize,
) -> Result<()> {
    if rows != cfg.n_neurons || cols != want_cols {
        return Err(Error::Format(format!(
            "{name} is {rows}x{cols}, config echo wants {}x{want_cols}",
            cfg.n_neurons
        )));
    }
    Ok(())
}

pub fn save_dense_checkpoint(
    path: &Path,
    cfg: &NetworkConfig,
    center: &DenseGenome,
) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(DENSE_CHECKPOINT_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_config_echo(w, cfg)?;
        write_real_matrix(w, &center.w_in)?;
        write_real_matrix(w, &center.w_rec)?;
        write_real_matrix(w, &center.w_out)?;
        Ok(())
    })
}

pub fn load_dense_checkpoint(path: &Path) -> Result<(NetworkConfig, DenseGenome)> {
    let mut r = open_reader(path)?;
    check_header(&mut r, DENSE_CHECKPOINT_MAGIC, "dense checkpoint")?;
    let cfg = read_config_echo(&mut r)?;
    let center = DenseGenome {
        w_in: read_real_matrix(&mut r)?,
        w_rec: read_real_matrix(&mut r)?,
        w_out: read_real_matrix(&mut r)?,
    };
    validate_block_dims(&cfg, center.w_in.rows(), center.w_in.cols(), "w_in", cfg.obs_dim)?;
    validate_block_dims(&cfg, center.w_rec.rows(), center.w_rec.cols(), "w_rec", cfg.n_neurons)?;
    if center.w_out.rows() != cfg.act_dim || center.w_out.cols() != cfg.n_neurons {
        return Err(Error::Format("w_out shape disagrees with config echo".into()));
    }
    if !center.all_finite() {
        return Err(Error::Format("checkpoint holds non-finite weights".into()));
    }
    expect_eof(&mut r, "dense checkpoint")?;
    Ok((cfg, center))
}

/// Either kind of checkpoint, dispatched on the magic bytes.
pub enum CheckpointPayload {
    Connection(ProbabilityModel),
    Weights(DenseGenome),
}

pub fn load_any_checkpoint(path: &Path) -> Result<(NetworkConfig, CheckpointPayload)> {
    let mut r = open_reader(path)?;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    drop(r);
    match &magic {
        m if m == CHECKPOINT_MAGIC => {
            let (cfg, model) = load_checkpoint(path)?;
            Ok((cfg, CheckpointPayload::Connection(model)))
        }
        m if m == DENSE_CHECKPOINT_MAGIC => {
            let (cfg, center) = load_dense_checkpoint(path)?;
            Ok((cfg, CheckpointPayload::Weights(center)))
        }
        other => Err(Error::Format(format!(
            "unrecognized checkpoint magic {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability::DEFAULT_EPSILON;

    fn sample_setup() -> (NetworkConfig, ProbabilityModel) {
        let cfg = NetworkConfig::new(10, 3, 2);
        let mut model = ProbabilityModel::uniform(&cfg, DEFAULT_EPSILON);
        let mut rng = crate::rng::CounterRng::from_key(&[31]);
        for b in crate::probability::BLOCKS {
            for v in model.block_mut(b).data_mut() {
                *v = rng.next_f64() as f32;
            }
        }
        model.clip();
        (cfg, model)
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ecrc");
        let (cfg, model) = sample_setup();
        save_checkpoint(&path, &cfg, &model).unwrap();
        let first = std::fs::read(&path).unwrap();

        let (cfg2, model2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model2, model);

        save_checkpoint(&path, &cfg2, &model2).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn mask_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("elite.ecmk");
        let (_, model) = sample_setup();
        let genome = model.extract();
        save_mask(&path, &genome).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back, genome);
        save_mask(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn dense_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("center.ecrc");
        let cfg = NetworkConfig::new(6, 2, 1);
        let mut center = DenseGenome::zeros(&cfg);
        center.w_rec.set(1, 2, -0.75);
        center.w_in.set(0, 1, 0.25);
        save_dense_checkpoint(&path, &cfg, &center).unwrap();
        let (cfg2, center2) = load_dense_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(center2, center);
        match load_any_checkpoint(&path).unwrap().1 {
            CheckpointPayload::Weights(c) => assert_eq!(c, center),
            _ => panic!("wrong payload kind"),
        }
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ecrc");
        let (cfg, model) = sample_setup();
        save_checkpoint(&path, &cfg, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut={cut}: {err:?}");
        }
    }

    #[test]
    fn wrong_magic_and_version_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ecrc");
        let (cfg, model) = sample_setup();
        save_checkpoint(&path, &cfg, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        std::fs::write(&path, &wrong_magic).unwrap();
        assert!(load_checkpoint(&path).is_err());

        bytes[4] = 99; // version
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn dimension_disagreement_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ecrc");
        let (cfg, model) = sample_setup();
        // echo a different neuron count than the stored matrices
        let mut wrong = cfg.clone();
        wrong.n_neurons = 12;
        save_checkpoint(&path, &wrong, &model).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn extraction_threshold_survives_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ecrc");
        let cfg = NetworkConfig::new(4, 3, 1);
        let mut model = ProbabilityModel::uniform(&cfg, DEFAULT_EPSILON);
        model.p_in.set(0, 0, 0.7);
        model.p_in.set(0, 1, 0.5);
        model.p_in.set(0, 2, 0.3);
        save_checkpoint(&path, &cfg, &model).unwrap();
        let (_, back) = load_checkpoint(&path).unwrap();
        let g = back.extract();
        assert!(g.w_in.get(0, 0));
        assert!(!g.w_in.get(0, 1));
        assert!(!g.w_in.get(0, 2));
    }
}
