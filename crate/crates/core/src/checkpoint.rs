//! Checkpoint container.
//!
//! Layout: the magic line `BOOTVIT-CKPT 1\n`, the manifest length as a
//! little-endian `u64`, a UTF-8 manifest, then raw little-endian tensor
//! payloads. Manifest lines are one of
//!
//! ```text
//! meta <key> <value>
//! tensor <name> <group> <dtype> <offset> <shape>
//! moment <name> <step> <dtype> <m offset> <v offset> <shape>
//! ```
//!
//! where offsets are relative to the payload start and shapes are
//! `x`-separated (`-` for a scalar). Shared tensors appear once under
//! their shared name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use bootvit_tensor::{Scalar, Tensor};

use crate::bootstrap::{OptimState, UpdateRule};
use crate::error::{CoreError, Result};
use crate::optim::{AdamW, Moments};
use crate::params::{Group, ParamStore};

const MAGIC: &[u8] = b"BOOTVIT-CKPT 1\n";

pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore<T>,
    pub optim: Option<OptimState<T>>,
}

fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| bad(format!("bad shape {s}"))))
        .collect()
}

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Format(msg.into())
}

fn push_tensor<T: Scalar>(payload: &mut Vec<u8>, t: &Tensor<T>) -> usize {
    let at = payload.len();
    for &v in t.data() {
        v.write_le(payload);
    }
    at
}

pub fn encode<T: Scalar>(meta: &BTreeMap<String, String>, store: &ParamStore<T>, optim: Option<&OptimState<T>>) -> Result<Vec<u8>> {
    let mut manifest = String::new();
    let mut payload = Vec::new();
    let mut all_meta = meta.clone();
    if let Some(o) = optim {
        let h = &o.hyper;
        for (k, v) in [("lr", h.lr), ("beta1", h.beta1), ("beta2", h.beta2), ("eps", h.eps), ("weight_decay", h.weight_decay)] {
            all_meta.insert(format!("optim.{k}"), format!("{v:e}"));
        }
        let rule = match o.rule {
            UpdateRule::AdamW => "adamw",
            UpdateRule::Sgd => "sgd",
        };
        all_meta.insert("optim.rule".into(), rule.into());
    }
    for (k, v) in &all_meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(bad(format!("meta entry {k:?} cannot be stored")));
        }
        let _ = writeln!(manifest, "meta {k} {v}");
    }
    for p in store.iter() {
        let at = push_tensor(&mut payload, &p.value);
        let _ = writeln!(
            manifest,
            "tensor {} {} {} {at} {}",
            p.name,
            p.group.as_str(),
            T::DTYPE,
            fmt_shape(p.value.shape())
        );
    }
    if let Some(o) = optim {
        for (name, m) in &o.moments {
            let am = push_tensor(&mut payload, &m.m);
            let av = push_tensor(&mut payload, &m.v);
            let _ = writeln!(manifest, "moment {name} {} {} {am} {av} {}", m.step, T::DTYPE, fmt_shape(m.m.shape()));
        }
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_tensor<T: Scalar>(payload: &[u8], dtype: &str, at: &str, shape: &str) -> Result<Tensor<T>> {
    if dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {dtype}, reading as {}", T::DTYPE)));
    }
    let at: usize = at.parse().map_err(|_| bad(format!("bad offset {at}")))?;
    let shape = parse_shape(shape)?;
    let n: usize = shape.iter().product();
    let end = at + n * T::BYTES;
    let bytes = payload
        .get(at..end)
        .ok_or_else(|| bad(format!("payload range {at}..{end} beyond {} bytes", payload.len())))?;
    let data = bytes.chunks(T::BYTES).map(T::read_le).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic line"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let manifest = rest.get(8..8 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &rest[8 + len..];
    let mut meta = BTreeMap::new();
    let mut store = ParamStore::new();
    let mut moments = BTreeMap::new();
    for (i, line) in manifest.lines().enumerate() {
        let f: Vec<&str> = line.splitn(3, ' ').collect();
        match f.first().copied() {
            Some("meta") if f.len() == 3 => {
                meta.insert(f[1].to_string(), f[2].to_string());
            }
            Some("tensor") => {
                let f: Vec<&str> = line.split(' ').collect();
                if f.len() != 6 {
                    return Err(bad(format!("manifest line {}: {line}", i + 1)));
                }
                let group = Group::parse(f[2]).ok_or_else(|| bad(format!("unknown group {}", f[2])))?;
                store.insert(f[1], group, read_tensor(payload, f[3], f[4], f[5])?)?;
            }
            Some("moment") => {
                let f: Vec<&str> = line.split(' ').collect();
                if f.len() != 7 {
                    return Err(bad(format!("manifest line {}: {line}", i + 1)));
                }
                let step = f[2].parse().map_err(|_| bad(format!("bad step {}", f[2])))?;
                let m = read_tensor(payload, f[3], f[4], f[6])?;
                let v = read_tensor(payload, f[3], f[5], f[6])?;
                moments.insert(f[1].to_string(), Moments { m, v, step });
            }
            _ => return Err(bad(format!("manifest line {}: {line}", i + 1))),
        }
    }
    let optim = match meta.get("optim.rule").map(String::as_str) {
        None => None,
        Some(rule) => {
            let num = |k: &str| -> Result<f64> {
                meta.get(&format!("optim.{k}"))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("missing optim.{k}")))
            };
            Some(OptimState {
                hyper: AdamW {
                    lr: num("lr")?,
                    beta1: num("beta1")?,
                    beta2: num("beta2")?,
                    eps: num("eps")?,
                    weight_decay: num("weight_decay")?,
                },
                rule: match rule {
                    "adamw" => UpdateRule::AdamW,
                    "sgd" => UpdateRule::Sgd,
                    other => return Err(bad(format!("unknown update rule {other}"))),
                },
                moments,
            })
        }
    };
    Ok(Checkpoint { meta, store, optim })
}

pub fn save<T: Scalar>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    store: &ParamStore<T>,
    optim: Option<&OptimState<T>>,
) -> Result<()> {
    std::fs::write(path, encode(meta, store, optim)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}
