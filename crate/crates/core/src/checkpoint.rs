//! Versioned text checkpoints.
//!
//! ```text
//! ncmn-checkpoint 1
//! config {"architecture":"plain_cnn",...}
//! param layer0.weight 8,3,3,3
//! <values separated by spaces>
//! ...
//! bn 0 8 0.9 0.00001
//! <running mean>
//! <running var>
//! end
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a checkpoint reloads
//! bit-for-bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::BNParams;
use crate::tensor::Tensor;
use crate::training::{build_model, Model, ModelConfig, Param};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "ncmn-checkpoint";

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v}").unwrap();
    }
    s
}

pub fn to_text(model: &Model) -> String {
    let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
    let cfg = serde_json::to_string(model.config()).expect("config serializes");
    writeln!(out, "config {cfg}").unwrap();
    for p in model.params() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        writeln!(out, "param {} {}", p.name, dims.join(",")).unwrap();
        writeln!(out, "{}", join(p.value.data())).unwrap();
    }
    for (i, bn) in model.batch_norms().iter().enumerate() {
        writeln!(out, "bn {i} {} {} {}", bn.channels(), bn.momentum, bn.epsilon).unwrap();
        writeln!(out, "{}", join(bn.running_mean.data())).unwrap();
        writeln!(out, "{}", join(bn.running_var.data())).unwrap();
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(Error::Data("checkpoint ends early".into())),
        }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Data(format!("checkpoint line {}: {msg}", self.last))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let v = line
            .split_ascii_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.fail(e))?;
        if v.len() != n {
            return Err(self.fail(format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    }
}

pub fn from_text(text: &str) -> Result<Model> {
    let mut lines = Lines { inner: text.lines().enumerate(), last: 0 };
    let header = lines.next()?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| lines.fail("not a checkpoint"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(lines.fail(format!("unsupported version {version}")));
    }
    let cfg_line = lines.next()?;
    let cfg: ModelConfig = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| lines.fail("missing config"))
        .and_then(|j| serde_json::from_str(j).map_err(|e| lines.fail(e)))?;
    let mut model = build_model(&cfg, 0).map_err(|e| lines.fail(e))?;

    let mut params = Vec::new();
    let mut bns = Vec::new();
    loop {
        let line = lines.next()?;
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        match fields.as_slice() {
            ["end"] => break,
            ["param", name, dims] => {
                let shape = dims
                    .split(',')
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| lines.fail(e))?;
                let values = lines.values(shape.iter().product())?;
                params.push(Param {
                    name: name.to_string(),
                    value: Tensor::new(&shape, values)?,
                });
            }
            ["bn", idx, c, momentum, eps] => {
                if idx.parse::<usize>().ok() != Some(bns.len()) {
                    return Err(lines.fail("batch norms out of order"));
                }
                let c: usize = c.parse().map_err(|e| lines.fail(e))?;
                let mut bn = BNParams::new(c);
                bn.momentum = momentum.parse().map_err(|e| lines.fail(e))?;
                bn.epsilon = eps.parse().map_err(|e| lines.fail(e))?;
                bn.running_mean = Tensor::vector(&lines.values(c)?);
                bn.running_var = Tensor::vector(&lines.values(c)?);
                bns.push(bn);
            }
            _ => return Err(lines.fail(format!("unexpected `{line}`"))),
        }
    }
    model.load_state(params, bns)?;
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{Architecture, NoiseType};

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            architecture: Architecture::Residual2Branch,
            depth: 5,
            width: 1,
            base_width: 2,
            noise_type: NoiseType::Shake,
            ..ModelConfig::default()
        };
        let mut m = build_model(&cfg, 9).unwrap();
        let rv = m.batch_norms_mut()[1].running_var.data_mut();
        rv[0] = 1.0 / 3.0;
        rv[1] = 7e-300;
        let text = to_text(&m);
        let back = from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn rejects_bad_input() {
        let m = build_model(&ModelConfig { depth: 2, ..ModelConfig::default() }, 1).unwrap();
        let text = to_text(&m);
        assert!(matches!(from_text(&text.replace("checkpoint 1", "checkpoint 9")), Err(Error::Data(_))));
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(matches!(from_text(&truncated), Err(Error::Data(_))));
        assert!(matches!(from_text(&text.replace("layer0.gamma", "layer0.scale")), Err(Error::Data(_))));
    }
}
