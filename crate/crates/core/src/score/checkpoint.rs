//! Scorer checkpoints.
//!
//! Binary file, all integers `u32` little-endian:
//!
//! ```text
//! magic "DDCMSCOR" | version | K | embed_dim | blocks | input_dim | hidden | groups
//! | tensor_count | per tensor: rank, dims... | parameters as f32 LE, layout order
//! ```
//!
//! A sidecar `<file>.meta` holds `key=value` lines with the same sizes plus the
//! schedule and time-input settings needed to rebuild the scorer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::mlp::{MlpScorer, TimeInput};
use super::network::{Network, NetworkConfig};
use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDCMSCOR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

pub fn save_checkpoint(scorer: &MlpScorer, path: &Path) -> Result<()> {
    let net = scorer.network();
    let cfg = net.config();
    let mut buf = Vec::with_capacity(64 + 4 * net.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        cfg.num_classes as u32,
        cfg.embed_dim as u32,
        cfg.blocks as u32,
        cfg.input_dim as u32,
        cfg.hidden as u32,
        cfg.groups as u32,
        net.specs().len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for spec in net.specs() {
        buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for &p in net.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let schedule = scorer.schedule();
    let tensors: Vec<String> = net
        .specs()
        .iter()
        .map(|s| {
            let dims: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
            format!("{}:{}", s.name, dims.join("x"))
        })
        .collect();
    let meta = format!(
        "format=didicm-scorer\nversion={CHECKPOINT_VERSION}\nclasses={}\nembed_dim={}\nblocks={}\ninput_dim={}\nhidden={}\ngroups={}\nsigma_bar_max={}\nschedule_decay={}\ntime_input={}\nparams={}\ntensors={}\n",
        cfg.num_classes,
        cfg.embed_dim,
        cfg.blocks,
        cfg.input_dim,
        cfg.hidden,
        cfg.groups,
        schedule.sigma_bar_max(),
        schedule.decay(),
        scorer.time_input(),
        net.num_params(),
        tensors.join(";"),
    );
    let mpath = meta_path(path);
    fs::write(&mpath, meta).map_err(|e| Error::io(mpath, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn meta_value<'a>(meta: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(path, format!("missing key '{key}'")))
}

fn meta_parse<T: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    meta_value(meta, key, path)?
        .parse()
        .map_err(|_| Error::format(path, format!("bad value for '{key}'")))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpScorer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let mut header = [0usize; 6];
    for h in &mut header {
        *h = r.u32()? as usize;
    }
    let [num_classes, embed_dim, blocks, input_dim, hidden, groups] = header;

    let mpath = meta_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta = parse_key_values(&text).map_err(|e| Error::format(&mpath, e))?;
    if meta_value(&meta, "format", &mpath)? != "didicm-scorer" {
        return Err(Error::format(&mpath, "not a scorer metadata file"));
    }
    for (key, value) in [
        ("classes", num_classes),
        ("embed_dim", embed_dim),
        ("blocks", blocks),
        ("input_dim", input_dim),
        ("hidden", hidden),
        ("groups", groups),
    ] {
        if meta_parse::<usize>(&meta, key, &mpath)? != value {
            return Err(Error::format(
                &mpath,
                format!("'{key}' disagrees with the binary header"),
            ));
        }
    }
    let schedule = NoiseSchedule::new(
        meta_parse(&meta, "sigma_bar_max", &mpath)?,
        meta_parse(&meta, "schedule_decay", &mpath)?,
    )?;
    let time_input: TimeInput = meta_value(&meta, "time_input", &mpath)?.parse()?;

    let config = NetworkConfig {
        input_dim,
        num_classes,
        embed_dim,
        hidden,
        blocks,
        groups,
        conditioned: true,
    };
    // initialisation is overwritten below; any seed will do
    let mut net =
        Network::new(config, &mut seeded(0)).map_err(|e| Error::format(path, e.to_string()))?;
    let count = r.u32()? as usize;
    if count != net.specs().len() {
        return Err(Error::format(
            path,
            "tensor count does not match architecture",
        ));
    }
    for spec in net.specs() {
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(Error::format(
                path,
                format!("tensor '{}' has shape {dims:?}", spec.name),
            ));
        }
    }
    let n = net.num_params();
    let data = r.take(4 * n)?;
    let params = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    net.set_params(params)?;
    MlpScorer::from_parts(net, schedule, time_input)
}
