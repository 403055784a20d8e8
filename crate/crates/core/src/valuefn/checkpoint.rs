//! Versioned little-endian binary checkpoints: network shape, feature
//! scales, online and target weights, Adam moments, schedule counters and the
//! frozen location embedding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::net::{FeatureScales, NetShape, ValueNetParams};
use super::trainer::{NoiseSchedule, TrainerState};
use crate::assign::{LimitPolicy, SolveOptions};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::roadnet::{LocationEmbedding, ProxyWeights};

const MAGIC: &[u8; 8] = b"RPVALUE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_vec<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LE>(v.len() as u64)?;
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn get_vec<R: Read>(r: &mut R, expect: Option<usize>) -> Result<Vec<f64>> {
    let n = r.read_u64::<LE>()? as usize;
    if let Some(e) = expect {
        if n != e {
            return Err(Error::Checkpoint(format!("vector of length {n}, expected {e}")));
        }
    }
    if n > (1 << 32) {
        return Err(Error::Checkpoint(format!("implausible vector length {n}")));
    }
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

pub fn write_checkpoint<W: Write>(t: &TrainerState, w: &mut W) -> Result<()> {
    let s = &t.online.shape;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;
    for d in [s.emb_dim, s.hidden, s.head1, s.head2] {
        w.write_u32::<LE>(d as u32)?;
    }
    let sc = &t.online.scales;
    for x in [sc.seconds, sc.vehicles, sc.requests, t.gamma] {
        w.write_f64::<LE>(x)?;
    }
    w.write_u64::<LE>(t.target_update_every)?;
    w.write_u64::<LE>(t.steps)?;
    w.write_u64::<LE>(t.skipped_steps)?;
    w.write_f64::<LE>(t.noise.start)?;
    w.write_f64::<LE>(t.noise.end)?;
    w.write_u64::<LE>(t.noise.decay_epochs)?;
    w.write_u64::<LE>(t.noise.elapsed)?;
    for x in [t.adam.lr, t.adam.beta1, t.adam.beta2, t.adam.eps] {
        w.write_f64::<LE>(x)?;
    }
    w.write_u64::<LE>(t.adam.t)?;
    put_vec(w, &t.online.theta)?;
    put_vec(w, &t.target.theta)?;
    put_vec(w, &t.adam.m)?;
    put_vec(w, &t.adam.v)?;
    let e = &t.online.embedding;
    w.write_u32::<LE>(e.dim as u32)?;
    w.write_f64::<LE>(e.time_scale)?;
    put_vec(w, &e.table)?;
    w.write_u32::<LE>(e.proxy.hidden as u32)?;
    put_vec(w, &e.proxy.w1)?;
    put_vec(w, &e.proxy.b1)?;
    put_vec(w, &e.proxy.w2)?;
    w.write_f64::<LE>(e.proxy.b2)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<TrainerState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a value-network checkpoint".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.read_u32::<LE>()? as usize;
    }
    let shape = NetShape {
        emb_dim: dims[0],
        hidden: dims[1],
        head1: dims[2],
        head2: dims[3],
    };
    let scales = FeatureScales {
        seconds: r.read_f64::<LE>()?,
        vehicles: r.read_f64::<LE>()?,
        requests: r.read_f64::<LE>()?,
    };
    let gamma = r.read_f64::<LE>()?;
    let target_update_every = r.read_u64::<LE>()?;
    let steps = r.read_u64::<LE>()?;
    let skipped_steps = r.read_u64::<LE>()?;
    let noise = NoiseSchedule {
        start: r.read_f64::<LE>()?,
        end: r.read_f64::<LE>()?,
        decay_epochs: r.read_u64::<LE>()?,
        elapsed: r.read_u64::<LE>()?,
    };
    let (lr, beta1, beta2, eps) = (
        r.read_f64::<LE>()?,
        r.read_f64::<LE>()?,
        r.read_f64::<LE>()?,
        r.read_f64::<LE>()?,
    );
    let t = r.read_u64::<LE>()?;
    let len = super::net::Layout::new(&shape).len;
    let theta = get_vec(r, Some(len))?;
    let target_theta = get_vec(r, Some(len))?;
    let m = get_vec(r, Some(len))?;
    let v = get_vec(r, Some(len))?;
    let dim = r.read_u32::<LE>()? as usize;
    let time_scale = r.read_f64::<LE>()?;
    let table = get_vec(r, None)?;
    let hidden = r.read_u32::<LE>()? as usize;
    let w1 = get_vec(r, Some(hidden * 2 * dim))?;
    let b1 = get_vec(r, Some(hidden))?;
    let w2 = get_vec(r, Some(hidden))?;
    let b2 = r.read_f64::<LE>()?;
    if dim == 0 || table.len() % dim != 0 {
        return Err(Error::Checkpoint("embedding table is ragged".into()));
    }
    let embedding = Arc::new(LocationEmbedding {
        dim,
        table,
        proxy: ProxyWeights {
            hidden,
            w1,
            b1,
            w2,
            b2,
        },
        time_scale,
    });
    let mut online = ValueNetParams::zeros(shape, scales, embedding)?;
    online.theta = theta;
    let mut target = online.clone();
    target.theta = target_theta;
    Ok(TrainerState {
        online,
        target,
        adam: Adam {
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
            t,
        },
        gamma,
        noise,
        steps,
        target_update_every,
        skipped_steps,
        solve: SolveOptions {
            on_limit: LimitPolicy::GreedyFallback,
            ..SolveOptions::default()
        },
    })
}

pub fn save_checkpoint(t: &TrainerState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{train_embeddings, EmbeddingConfig, RoadNetwork};
    use crate::valuefn::TrainerConfig;

    fn state() -> TrainerState {
        let net = RoadNetwork::grid(2, 3, 60.0).unwrap();
        let (emb, _) = train_embeddings(
            &net,
            &EmbeddingConfig {
                dim: 3,
                hidden: 4,
                steps: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let shape = NetShape {
            emb_dim: 3,
            hidden: 4,
            head1: 3,
            head2: 2,
        };
        let p = ValueNetParams::random(shape, FeatureScales::default(), Arc::new(emb), 6).unwrap();
        let mut t = TrainerState::new(p, &TrainerConfig::default()).unwrap();
        t.adam.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
        t.adam.t = 17;
        t.steps = 17;
        t.noise.elapsed = 4;
        t.target.theta[0] = -0.25;
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = state();
        let mut buf = Vec::new();
        write_checkpoint(&t, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let t = state();
        save_checkpoint(&t, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), t);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let t = state();
        let mut buf = Vec::new();
        write_checkpoint(&t, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut future = buf.clone();
        future[8] = 9;
        assert!(matches!(read_checkpoint(&mut future.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&mut &buf[..buf.len() / 2]).is_err());
    }
}
