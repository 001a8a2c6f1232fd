//! Checkpoints: a flat binary of tensors plus a plain-text manifest.
//!
//! For a prefix `P` two files are written:
//!
//! * `P.bin`: every tensor's elements back to back, row-major, little-endian IEEE-754
//!   in the manifest's precision (`f32`: 4 bytes, `f64`: 8 bytes), no header or padding;
//! * `P.manifest`: UTF-8 lines
//!   ```text
//!   magattn-checkpoint 1
//!   precision f32
//!   step <updates applied>
//!   adam_t <optimizer step count>
//!   meta <key> <value...>              (zero or more, free-form)
//!   tensor <name> <d0,d1,...> <offset> <count>
//!   ```
//!   where `offset` and `count` are in elements. Parameter tensors use the model's
//!   dotted names; Adam moments are stored as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use magattn::{Element, Tensor};

use crate::error::{io_err, Result, ToyError};
use crate::train::Trainer;

const MAGIC: &str = "magattn-checkpoint 1";

fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut bin = prefix.as_os_str().to_owned();
    bin.push(".bin");
    let mut man = prefix.as_os_str().to_owned();
    man.push(".manifest");
    (bin.into(), man.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Element> {
    pub step: usize,
    pub adam_t: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: BTreeMap<String, Tensor<F>>,
}

fn write_value<F: Element>(w: &mut impl Write, x: F) -> std::io::Result<()> {
    match F::NAME {
        "f32" => w.write_all(&(x.as_f64() as f32).to_le_bytes()),
        _ => w.write_all(&x.as_f64().to_le_bytes()),
    }
}

fn width<F: Element>() -> usize {
    if F::NAME == "f32" { 4 } else { 8 }
}

/// Writes the trainer's parameters and optimizer state.
pub fn save<F: Element>(prefix: &Path, trainer: &Trainer<F>, meta: &[(String, String)]) -> Result<()> {
    let (bin_path, man_path) = paths(prefix);
    let named = trainer.model.params.named();
    let mut entries: Vec<(String, &Tensor<F>)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
    for (i, (n, _)) in named.iter().enumerate() {
        entries.push((format!("adam.m.{n}"), &trainer.opt.m[i]));
        entries.push((format!("adam.v.{n}"), &trainer.opt.v[i]));
    }
    let mut bin = BufWriter::new(fs::File::create(&bin_path).map_err(io_err(&bin_path))?);
    let mut man = format!("{MAGIC}\nprecision {}\nstep {}\nadam_t {}\n", F::NAME, trainer.step, trainer.opt.t);
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(ToyError::Config(format!("meta entry '{k}' cannot be stored on one line")));
        }
        man.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0;
    for (name, t) in &entries {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        man.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.numel()));
        for &x in t.data() {
            write_value(&mut bin, x).map_err(io_err(&bin_path))?;
        }
        offset += t.numel();
    }
    bin.flush().map_err(io_err(&bin_path))?;
    fs::write(&man_path, man).map_err(io_err(&man_path))?;
    Ok(())
}

/// Reads a checkpoint written by [`save`] at the same precision.
pub fn load<F: Element>(prefix: &Path) -> Result<Checkpoint<F>> {
    let (bin_path, man_path) = paths(prefix);
    let bad = |detail: String| ToyError::Checkpoint { path: man_path.clone(), detail };
    let text = fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing header".into()));
    }
    let mut ck = Checkpoint { step: 0, adam_t: 0, meta: Vec::new(), tensors: BTreeMap::new() };
    let w = width::<F>();
    for line in lines {
        let mut parts = line.splitn(2, ' ');
        let (key, rest) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("'{line}': {e}")));
        match key {
            "precision" if rest != F::NAME => {
                return Err(bad(format!("stored as {rest}, requested {}", F::NAME)));
            }
            "precision" => {}
            "step" => ck.step = int(rest)?,
            "adam_t" => ck.adam_t = int(rest)? as u64,
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("'{line}'")));
                }
                let shape = if f[1].is_empty() {
                    Vec::new()
                } else {
                    f[1].split(',').map(int).collect::<Result<Vec<_>>>()?
                };
                let (offset, count) = (int(f[2])?, int(f[3])?);
                if shape.iter().product::<usize>() != count || (offset + count) * w > bytes.len() {
                    return Err(bad(format!("tensor {} out of range", f[0])));
                }
                let data = bytes[offset * w..(offset + count) * w]
                    .chunks_exact(w)
                    .map(|c| match w {
                        4 => F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                        _ => F::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                    })
                    .collect();
                ck.tensors.insert(f[0].to_string(), Tensor::new(shape, data)?);
            }
            "" => {}
            other => return Err(bad(format!("unknown entry '{other}'"))),
        }
    }
    Ok(ck)
}

impl<F: Element> Trainer<F> {
    /// Restores parameters, optimizer moments and the step counter from `ck`.
    /// Every tensor must match the trainer's model by name and shape.
    pub fn restore(&mut self, ck: &Checkpoint<F>) -> Result<()> {
        let fetch = |name: &str, like: &Tensor<F>| -> Result<Tensor<F>> {
            match ck.tensors.get(name) {
                Some(t) if t.shape() == like.shape() => Ok(t.clone()),
                Some(t) => Err(ToyError::Config(format!(
                    "checkpoint tensor {name} is {:?}, model expects {:?}",
                    t.shape(),
                    like.shape()
                ))),
                None => Err(ToyError::Config(format!("checkpoint lacks {name}"))),
            }
        };
        let params = self.model.params.try_map(|n, t| fetch(n, t))?;
        let named = params.named();
        let mut m = Vec::with_capacity(named.len());
        let mut v = Vec::with_capacity(named.len());
        for (n, t) in &named {
            m.push(fetch(&format!("adam.m.{n}"), t)?);
            v.push(fetch(&format!("adam.v.{n}"), t)?);
        }
        self.model.params = params;
        self.opt.m = m;
        self.opt.v = v;
        self.opt.t = ck.adam_t;
        self.step = ck.step;
        Ok(())
    }
}
