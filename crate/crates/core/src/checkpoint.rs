//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic, a u32 format version, then fixed-order sections
//! with little-endian integers and f64 bit patterns, every vector length
//! prefixed. A save/load round trip is bit-exact, so resuming from a
//! checkpoint reproduces the uninterrupted run. Unknown versions are refused.
//! Writes go to a temporary file that is renamed into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::ChannelStats;
use crate::dynamics::{BnRunningStats, DynamicsSpec, Family};
use crate::error::{Error, Result};
use crate::layers::{Activation, StepNorm};
use crate::training::EpochRecord;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: DynamicsSpec,
    pub weights: Vec<f64>,
    pub velocity: Vec<f64>,
    pub rng_state: [u64; 4],
    pub next_epoch: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub best_weights: Vec<f64>,
    pub bn: BnRunningStats,
    pub best_bn: BnRunningStats,
    pub data_stats: Option<ChannelStats>,
    pub history: Vec<EpochRecord>,
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.out.write_all(&[v])?;
        Ok(())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_bits().to_le_bytes())?;
        Ok(())
    }

    fn f64_vec(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        for &x in v {
            self.f64(x)?;
        }
        Ok(())
    }

    fn usize_vec(&mut self, v: &[usize]) -> Result<()> {
        self.u64(v.len() as u64)?;
        for &x in v {
            self.u64(x as u64)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    input: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.input.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (1 << 32) {
            return Err(Error::format(format!("implausible section length {n}")));
        }
        Ok(n as usize)
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }

    fn usize_vec(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.u64()? as usize);
        }
        Ok(v)
    }
}

fn family_code(f: Family) -> u8 {
    match f {
        Family::Parabolic => 0,
        Family::Hamiltonian => 1,
        Family::SecondOrder => 2,
    }
}

fn family_from(code: u8) -> Result<Family> {
    match code {
        0 => Ok(Family::Parabolic),
        1 => Ok(Family::Hamiltonian),
        2 => Ok(Family::SecondOrder),
        _ => Err(Error::format(format!("unknown family code {code}"))),
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Tanh => 2,
    }
}

fn activation_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Tanh),
        _ => Err(Error::format(format!("unknown activation code {code}"))),
    }
}

fn write_spec<W: Write>(w: &mut Writer<W>, spec: &DynamicsSpec) -> Result<()> {
    w.u8(family_code(spec.family))?;
    w.u8(activation_code(spec.activation))?;
    match spec.step_norm {
        StepNorm::None => {
            w.u8(0)?;
            w.f64(0.0)?;
        }
        StepNorm::Tv { eps } => {
            w.u8(1)?;
            w.f64(eps)?;
        }
    }
    w.u64(spec.in_channels as u64)?;
    w.u64(spec.image_height as u64)?;
    w.u64(spec.image_width as u64)?;
    w.usize_vec(&spec.widths)?;
    w.u64(spec.final_width as u64)?;
    w.u64(spec.steps_per_block as u64)?;
    w.f64(spec.dt)?;
    w.u64(spec.num_classes as u64)?;
    Ok(())
}

fn read_spec<R: Read>(r: &mut Reader<R>) -> Result<DynamicsSpec> {
    let family = family_from(r.u8()?)?;
    let activation = activation_from(r.u8()?)?;
    let norm_code = r.u8()?;
    let eps = r.f64()?;
    let step_norm = match norm_code {
        0 => StepNorm::None,
        1 => StepNorm::Tv { eps },
        _ => return Err(Error::format(format!("unknown norm code {norm_code}"))),
    };
    let in_channels = r.u64()? as usize;
    let image_height = r.u64()? as usize;
    let image_width = r.u64()? as usize;
    let widths = r.usize_vec()?;
    let final_width = r.u64()? as usize;
    let steps_per_block = r.u64()? as usize;
    let dt = r.f64()?;
    let num_classes = r.u64()? as usize;
    Ok(DynamicsSpec {
        family,
        in_channels,
        image_height,
        image_width,
        widths,
        final_width,
        steps_per_block,
        dt,
        num_classes,
        activation,
        step_norm,
    })
}

fn write_bn<W: Write>(w: &mut Writer<W>, bn: &BnRunningStats) -> Result<()> {
    w.u64(bn.layers.len() as u64)?;
    for (mean, var) in &bn.layers {
        w.f64_vec(mean)?;
        w.f64_vec(var)?;
    }
    Ok(())
}

fn read_bn<R: Read>(r: &mut Reader<R>) -> Result<BnRunningStats> {
    let n = r.len()?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = r.f64_vec()?;
        let var = r.f64_vec()?;
        layers.push((mean, var));
    }
    Ok(BnRunningStats { layers })
}

/// Saves the checkpoint atomically (write to `<path>.tmp`, then rename).
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = Writer {
            out: BufWriter::new(File::create(&tmp)?),
        };
        w.out.write_all(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        write_spec(&mut w, &cp.spec)?;
        w.f64_vec(&cp.weights)?;
        w.f64_vec(&cp.velocity)?;
        for s in cp.rng_state {
            w.u64(s)?;
        }
        w.u64(cp.next_epoch as u64)?;
        w.u64(cp.best_epoch as u64)?;
        w.f64(cp.best_val_accuracy)?;
        w.f64(cp.best_val_loss)?;
        w.f64_vec(&cp.best_weights)?;
        write_bn(&mut w, &cp.bn)?;
        write_bn(&mut w, &cp.best_bn)?;
        match &cp.data_stats {
            None => w.u8(0)?,
            Some(stats) => {
                w.u8(1)?;
                w.f64_vec(&stats.mean)?;
                w.f64_vec(&stats.std)?;
            }
        }
        w.u64(cp.history.len() as u64)?;
        for rec in &cp.history {
            w.u64(rec.epoch as u64)?;
            w.u64(rec.stage as u64)?;
            w.f64(rec.lr)?;
            w.f64(rec.train_objective)?;
            w.f64(rec.train_loss)?;
            w.f64(rec.train_accuracy)?;
            w.f64(rec.val_loss)?;
            w.f64(rec.val_accuracy)?;
        }
        w.out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        input: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 8];
    r.input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{}: not a checkpoint (magic {:02x?})",
            path.display(),
            magic
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let spec = read_spec(&mut r)?;
    spec.validate()?;
    let weights = r.f64_vec()?;
    let velocity = r.f64_vec()?;
    let expect = spec.param_count();
    if weights.len() != expect || velocity.len() != expect {
        return Err(Error::format(format!(
            "{}: weight vector length {} does not match the architecture ({expect})",
            path.display(),
            weights.len()
        )));
    }
    let mut rng_state = [0u64; 4];
    for s in rng_state.iter_mut() {
        *s = r.u64()?;
    }
    let next_epoch = r.u64()? as usize;
    let best_epoch = r.u64()? as usize;
    let best_val_accuracy = r.f64()?;
    let best_val_loss = r.f64()?;
    let best_weights = r.f64_vec()?;
    if best_weights.len() != expect {
        return Err(Error::format(format!(
            "{}: best-weight vector length {} does not match the architecture ({expect})",
            path.display(),
            best_weights.len()
        )));
    }
    let bn = read_bn(&mut r)?;
    let best_bn = read_bn(&mut r)?;
    let data_stats = match r.u8()? {
        0 => None,
        1 => Some(ChannelStats {
            mean: r.f64_vec()?,
            std: r.f64_vec()?,
        }),
        other => return Err(Error::format(format!("bad data-stats flag {other}"))),
    };
    let n = r.len()?;
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        history.push(EpochRecord {
            epoch: r.u64()? as usize,
            stage: r.u64()? as usize,
            lr: r.f64()?,
            train_objective: r.f64()?,
            train_loss: r.f64()?,
            train_accuracy: r.f64()?,
            val_loss: r.f64()?,
            val_accuracy: r.f64()?,
        });
    }
    Ok(Checkpoint {
        spec,
        weights,
        velocity,
        rng_state,
        next_epoch,
        best_epoch,
        best_val_accuracy,
        best_val_loss,
        best_weights,
        bn,
        best_bn,
        data_stats,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::weights::NetWeights;

    fn sample_checkpoint() -> Checkpoint {
        let spec = DynamicsSpec::toy(Family::Hamiltonian);
        let mut rng = Rng::seed_from_u64(1);
        let w = NetWeights::init(&spec, &mut rng).unwrap();
        let bn = BnRunningStats::init(&spec);
        Checkpoint {
            weights: w.to_flat(),
            velocity: w.zeros_like().to_flat(),
            rng_state: rng.state(),
            next_epoch: 3,
            best_epoch: 2,
            best_val_accuracy: 0.75,
            best_val_loss: 0.61,
            best_weights: w.to_flat(),
            bn: bn.clone(),
            best_bn: bn,
            data_stats: Some(ChannelStats {
                mean: vec![0.5],
                std: vec![0.25],
            }),
            history: vec![EpochRecord {
                epoch: 0,
                stage: 0,
                lr: 0.1,
                train_objective: 1.0,
                train_loss: 0.9,
                train_accuracy: 0.5,
                val_loss: 0.8,
                val_accuracy: 0.55,
            }],
            spec,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("pdenet-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ck");
        let cp = sample_checkpoint();
        save_checkpoint(&cp, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(cp, loaded);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = std::env::temp_dir().join("pdenet-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("version.ck");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // bump the version field
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version 99"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_magic_and_truncation_rejected() {
        let dir = std::env::temp_dir().join("pdenet-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ck");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
