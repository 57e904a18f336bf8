//! Self-describing checkpoint container.
//!
//! Layout: a UTF-8 header of newline-terminated lines, then the raw
//! little-endian `f64` values of every tensor in header order.
//!
//! ```text
//! mtct-checkpoint v1
//! stage <tag>
//! schema <name:card,...>
//! trunk <trunk config>
//! hidden <h1> <h2>
//! tensors <n>
//! <name> <frozen 0|1> <dim> <dim> ...      (n lines)
//! end
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use mtct_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::model::{MtnModel, Param};
use crate::schema::AttributeSchema;

const MAGIC: &str = "mtct-checkpoint v1";

/// A model snapshot tagged with the training stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub model: MtnModel,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, model: MtnModel) -> Result<Self> {
        let stage = stage.into();
        if stage.is_empty() || stage.chars().any(char::is_whitespace) {
            return Err(CoreError::contract(format!("stage tag must be one non-empty word, got {stage:?}")));
        }
        Ok(Checkpoint { stage, model })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut head = format!(
            "{MAGIC}\nstage {}\nschema {}\ntrunk {}\nhidden {} {}\ntensors {}\n",
            self.stage,
            m.schema(),
            m.trunk(),
            m.hidden().0,
            m.hidden().1,
            m.params().len()
        );
        for p in m.params() {
            head.push_str(&format!("{} {}", p.name, u8::from(p.frozen)));
            for d in p.tensor.shape() {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for p in m.params() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| CoreError::format("checkpoint", d);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("missing magic line".into()));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` line, got {line:?}")))
        };
        let stage = field(next_line()?, "stage")?;
        let schema: AttributeSchema = field(next_line()?, "schema")?.parse()?;
        let trunk = field(next_line()?, "trunk")?.parse()?;
        let hidden_line = field(next_line()?, "hidden")?;
        let hidden: Vec<usize> = hidden_line.split(' ').map(|t| t.parse().map_err(|_| bad(format!("bad hidden {t:?}")))).collect::<Result<_>>()?;
        let [h1, h2] = hidden[..] else {
            return Err(bad(format!("hidden needs two widths, got {hidden_line:?}")));
        };
        let n: usize = field(next_line()?, "tensors")?.parse().map_err(|_| bad("bad tensor count".into()))?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next_line()?;
            let toks: Vec<&str> = line.split(' ').collect();
            if toks.len() < 3 {
                return Err(bad(format!("bad tensor line {line:?}")));
            }
            let frozen = match toks[1] {
                "0" => false,
                "1" => true,
                f => return Err(bad(format!("bad frozen flag {f:?}"))),
            };
            let shape: Vec<usize> = toks[2..].iter().map(|t| t.parse().map_err(|_| bad(format!("bad dim {t:?}")))).collect::<Result<_>>()?;
            entries.push((toks[0].to_string(), frozen, shape));
        }
        if next_line()? != "end" {
            return Err(bad("missing end line".into()));
        }
        let payload = &bytes[pos..];
        let total: usize = entries.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(bad(format!("payload has {} bytes, header describes {}", payload.len(), total * 8)));
        }
        let template = MtnModel::build(&schema, trunk, (h1, h2), 0)?;
        if template.params().len() != n {
            return Err(bad(format!("{n} tensors for an architecture with {}", template.params().len())));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut params = Vec::with_capacity(n);
        for ((name, frozen, shape), t) in entries.into_iter().zip(template.params()) {
            let len = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(len).collect();
            params.push(Param { name, group: t.group, role: t.role, tensor: Tensor::new(shape, data)?, frozen });
        }
        let model = MtnModel::from_params(schema, trunk, (h1, h2), params)?;
        Checkpoint::new(stage, model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FreezeMask, TrunkConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let schema = AttributeSchema::desk_default();
        let trunk = TrunkConfig::with_widths(16, [4, 4, 8, 8, 8]).unwrap();
        let mut m = MtnModel::build(&schema, trunk, (6, 5), 9).unwrap();
        let mask = FreezeMask::conv5_and_fc(&m);
        m.apply_freeze(&mask).unwrap();
        m.params_mut()[0].tensor.data_mut()[0] = -0.0;
        m.params_mut()[1].tensor.data_mut()[0] = f64::MIN_POSITIVE / 4.0;
        let ck = Checkpoint::new("stage2", m).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.stage, "stage2");
        for (a, b) in ck.model.params().iter().zip(back.model.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let trunk = TrunkConfig::with_widths(16, [2, 2, 2, 2, 2]).unwrap();
        let m = MtnModel::build(&AttributeSchema::desk_default(), trunk, (3, 3), 1).unwrap();
        let bytes = Checkpoint::new("stage1", m).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("hidden 3 3", "hidden 3 4");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
        assert!(Checkpoint::new("two words", MtnModel::build(&AttributeSchema::desk_default(), trunk, (3, 3), 1).unwrap()).is_err());
    }

    #[test]
    fn trunk_text_round_trip() {
        for t in [TrunkConfig::default(), TrunkConfig::paper_scale(), TrunkConfig::with_widths(16, [1, 2, 3, 4, 5]).unwrap()] {
            assert_eq!(t.to_string().parse::<TrunkConfig>().unwrap(), t);
        }
        assert!("in=3 size=32 pool=2/2 blocks=1:3:1:1:p".parse::<TrunkConfig>().is_err());
    }
}
