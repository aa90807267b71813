use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::{Layout, ParamBlock};
use crate::{Error, Result, Scalar};

const MAGIC: &str = "refgame-checkpoint,1";

/// (tensor name, shape, values) for each tensor of a block.
type BlockTensors = Vec<(String, Vec<usize>, Vec<f64>)>;

/// Named parameter blocks plus string metadata, stored as text.
///
/// ```text
/// refgame-checkpoint,1
/// meta,<key>,<value>
/// tensor,<block>,<tensor>,<d0>x<d1>..,<v0>,<v1>,...
/// ```
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so a save/load cycle is exact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    blocks: BTreeMap<String, BlockTensors>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no `{key}` entry")))
    }

    pub fn insert_block<F: Scalar>(&mut self, name: &str, block: &ParamBlock<F>) {
        let tensors = block
            .layout()
            .tensors()
            .iter()
            .map(|t| {
                let vals = block.values()[t.offset..t.offset + t.len()]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                (t.name.clone(), t.shape.clone(), vals)
            })
            .collect();
        self.blocks.insert(name.to_string(), tensors);
    }

    /// Rebuilds a block; names and shapes must match `layout` exactly.
    pub fn block<F: Scalar>(&self, name: &str, layout: &Arc<Layout>) -> Result<ParamBlock<F>> {
        let tensors = self
            .blocks
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no block `{name}`")))?;
        if tensors.len() != layout.tensors().len() {
            return Err(Error::invalid(format!("block `{name}` has the wrong number of tensors")));
        }
        let mut values = Vec::with_capacity(layout.len());
        for ((tname, shape, vals), info) in tensors.iter().zip(layout.tensors()) {
            if *tname != info.name || *shape != info.shape {
                return Err(Error::invalid(format!(
                    "block `{name}`: tensor {tname} {shape:?} does not match expected {} {:?}",
                    info.name, info.shape
                )));
            }
            values.extend(vals.iter().map(|&v| F::of(v)));
        }
        ParamBlock::from_values(layout.clone(), values)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta,{k},{v}");
        }
        for (block, tensors) in &self.blocks {
            for (name, shape, vals) in tensors {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                let _ = write!(out, "tensor,{block},{name},{}", dims.join("x"));
                for v in vals {
                    let _ = write!(out, ",{v:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::invalid("not a refgame checkpoint"));
        }
        let mut ck = Checkpoint::new();
        for (n, line) in lines.enumerate() {
            let bad = |m: &str| Error::invalid(format!("checkpoint line {}: {m}", n + 2));
            let mut parts = line.splitn(2, ',');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().ok_or_else(|| bad("truncated meta"))?;
                    let (k, v) = rest.split_once(',').ok_or_else(|| bad("meta needs key,value"))?;
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split(',').collect();
                    if fields.len() < 3 {
                        return Err(bad("truncated tensor"));
                    }
                    let shape: Vec<usize> = fields[2]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad shape")))
                        .collect::<Result<_>>()?;
                    let vals: Vec<f64> = fields[3..]
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad("bad value")))
                        .collect::<Result<_>>()?;
                    if vals.len() != shape.iter().product::<usize>() {
                        return Err(bad("value count does not match shape"));
                    }
                    ck.blocks.entry(fields[0].to_string()).or_default().push((
                        fields[1].to_string(),
                        shape,
                        vals,
                    ));
                }
                Some("") => {}
                _ => return Err(bad("unknown record")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
