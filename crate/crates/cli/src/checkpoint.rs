//! Checkpoint files.
//!
//! A checkpoint is a line-oriented text header followed, for each
//! parameter, by a `param <name> <d0>x<d1>..` line and the raw values as
//! little-endian `f64`. The file ends with an `end` line so truncation is
//! detected.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context};

use lossguard_core::losses::AuxKind;
use lossguard_core::nets::{ArchConfig, JointModel};
use lossguard_core::Tensor;

const MAGIC: &str = "lossguard-checkpoint 1";

/// A model plus what is needed to rebuild the data it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: JointModel,
    pub aux: AuxKind,
    /// Root seed of the run that produced the model.
    pub root_seed: u64,
    /// Classes withheld during training (empty for full-data runs).
    pub held_out: Vec<usize>,
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
    }
}

fn split<T: std::str::FromStr>(s: &str, sep: char) -> anyhow::Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(sep)
        .map(|p| p.parse::<T>().with_context(|| format!("bad list item `{p}`")))
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.model.arch();
        let mut out = Vec::new();
        let header = [
            MAGIC.to_string(),
            format!("aux {}", self.aux.as_str()),
            format!("root_seed {}", self.root_seed),
            format!("init_seed {}", self.model.seed()),
            format!("held_out {}", join(&self.held_out, ",")),
            format!("input_dim {}", a.input_dim),
            format!("hidden_dims {}", join(&a.hidden_dims, ",")),
            format!("num_classes {}", a.num_classes),
            format!("tap_layers {}", join(&a.tap_layers, ",")),
            format!("tap_embed_dim {}", a.tap_embed_dim),
            format!("dropout {}", a.dropout),
            format!("params {}", self.model.params().len()),
        ];
        for line in header {
            writeln!(out, "{line}").expect("write to Vec");
        }
        for (name, t) in self.model.params() {
            writeln!(out, "param {name} {}", join(t.shape(), "x")).expect("write to Vec");
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(b'\n');
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_reader(r: impl Read) -> anyhow::Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> anyhow::Result<String> {
            line.clear();
            let n = r.read_line(&mut line)?;
            ensure!(n > 0, "checkpoint is truncated");
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next_line(&mut r)?;
        ensure!(magic == MAGIC, "not a checkpoint (header `{magic}`)");

        let mut fields = BTreeMap::new();
        loop {
            let l = next_line(&mut r)?;
            let (k, v) = l.split_once(' ').with_context(|| format!("bad header line `{l}`"))?;
            fields.insert(k.to_string(), v.to_string());
            if k == "params" {
                break;
            }
        }
        let get = |k: &str| -> anyhow::Result<&str> {
            fields
                .get(k)
                .map(String::as_str)
                .with_context(|| format!("checkpoint header lacks `{k}`"))
        };
        let arch = ArchConfig {
            input_dim: get("input_dim")?.parse()?,
            hidden_dims: split(get("hidden_dims")?, ',')?,
            num_classes: get("num_classes")?.parse()?,
            tap_layers: split(get("tap_layers")?, ',')?,
            tap_embed_dim: get("tap_embed_dim")?.parse()?,
            dropout: get("dropout")?.parse()?,
        };
        let aux = AuxKind::parse(get("aux")?).context("unknown aux kind in checkpoint")?;
        let root_seed = get("root_seed")?.parse()?;
        let init_seed = get("init_seed")?.parse()?;
        let held_out = split(get("held_out")?, ',')?;
        let count: usize = get("params")?.parse()?;

        let mut params = BTreeMap::new();
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let mut parts = l.split(' ');
            let (Some("param"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                bail!("bad parameter line `{l}`");
            };
            let shape: Vec<usize> = split(dims, 'x')?;
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf).context("checkpoint is truncated")?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mut nl = [0u8; 1];
            r.read_exact(&mut nl).context("checkpoint is truncated")?;
            ensure!(nl[0] == b'\n', "parameter `{name}` has the wrong length");
            params.insert(name.to_string(), Tensor::new(shape, data)?);
        }
        ensure!(next_line(&mut r)? == "end", "missing end marker");
        let model = JointModel::from_params(arch, init_seed, params)?;
        Ok(Checkpoint {
            model,
            aux,
            root_seed,
            held_out,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, self.to_bytes()).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let f = fs::File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
        Self::from_reader(f).with_context(|| format!("reading {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = ArchConfig {
            input_dim: 3,
            hidden_dims: vec![4, 5],
            num_classes: 2,
            tap_layers: vec![1],
            tap_embed_dim: 2,
            dropout: 0.25,
        };
        Checkpoint {
            model: JointModel::init(arch, 17).unwrap(),
            aux: AuxKind::Contrastive,
            root_seed: 99,
            held_out: vec![5, 6, 7],
        }
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let c = sample();
        let back = Checkpoint::from_reader(&c.to_bytes()[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_bits_roundtrip(bits in proptest::collection::vec(proptest::prelude::any::<u64>(), 64), seed in 0u64..1000) {
            let mut c = sample();
            c.root_seed = seed;
            let mut i = 0;
            for t in c.model.params_mut().values_mut() {
                for v in t.data_mut() {
                    let x = f64::from_bits(bits[i % bits.len()]);
                    *v = if x.is_finite() { x } else { -0.0 };
                    i += 1;
                }
            }
            let back = Checkpoint::from_reader(&c.to_bytes()[..]).unwrap();
            for (name, t) in c.model.params() {
                let b = back.model.param(name).unwrap();
                proptest::prop_assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            proptest::prop_assert_eq!(back.root_seed, seed);
        }
    }

    #[test]
    fn empty_held_out_roundtrips() {
        let mut c = sample();
        c.held_out.clear();
        assert_eq!(Checkpoint::from_reader(&c.to_bytes()[..]).unwrap(), c);
    }

    #[test]
    fn truncation_detected() {
        let b = sample().to_bytes();
        for cut in [5, b.len() / 2, b.len() - 2] {
            assert!(Checkpoint::from_reader(&b[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        assert!(Checkpoint::from_reader(&b"hello\n"[..]).is_err());
    }
}
