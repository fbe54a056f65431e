//! `.dpm` model files.
//!
//! A text header of `key=value` lines is followed by one line per layer
//! payload. Every float vector is stored as base64 of its little-endian
//! `f64` bytes, so a round trip is bit-exact.
//!
//! ```text
//! #deepode-model v1
//! system_name=lotka_volterra
//! dt=0.1
//! autonomous=1
//! forcing_period=none
//! layer_sizes=2,200,200,200,2
//! activation=gelu
//! train_seed=7
//! bct_lambda=0.1
//! bct_mask=0,0
//! input_mean=<base64>
//! input_std=<base64>
//! label_mean=<base64>
//! label_std=<base64>
//! ---
//! layer0.weight=<base64>
//! layer0.bias=<base64>
//! ...
//! end
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::mlp::{param_count, Mlp};
use super::preprocess::Preprocessor;
use super::MlpModel;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &str = "#deepode-model";
pub const MODEL_VERSION: u32 = 1;
pub const ACTIVATION: &str = "gelu";

fn encode(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(s: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s.trim())
        .map_err(|e| Error::Format(format!("{what}: bad base64 payload ({e})")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{what}: expected {expected} values, payload holds {} bytes",
            bytes.len()
        )));
    }
    let v: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format(format!("{what}: non-finite value")));
    }
    Ok(v)
}

pub fn write_model<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    let mlp = &model.mlp;
    let pre = &model.pre;
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    writeln!(w, "{MODEL_MAGIC} v{MODEL_VERSION}")?;
    writeln!(w, "system_name={}", model.system_name)?;
    writeln!(w, "dt={:?}", model.dt)?;
    writeln!(w, "autonomous={}", u8::from(model.autonomous))?;
    match model.forcing_period {
        Some(p) => writeln!(w, "forcing_period={p:?}")?,
        None => writeln!(w, "forcing_period=none")?,
    }
    writeln!(w, "layer_sizes={}", join(mlp.sizes()))?;
    writeln!(w, "activation={ACTIVATION}")?;
    writeln!(w, "train_seed={}", model.train_seed)?;
    writeln!(w, "bct_lambda={:?}", pre.bct_lambda)?;
    let mask: Vec<usize> = pre.bct_mask.iter().map(|&b| usize::from(b)).collect();
    writeln!(w, "bct_mask={}", join(&mask))?;
    writeln!(w, "input_mean={}", encode(&pre.input_mean))?;
    writeln!(w, "input_std={}", encode(&pre.input_std))?;
    writeln!(w, "label_mean={}", encode(&pre.label_mean))?;
    writeln!(w, "label_std={}", encode(&pre.label_std))?;
    writeln!(w, "---")?;
    for l in 0..mlp.n_layers() {
        let (wr, br) = mlp.layer_range(l);
        writeln!(w, "layer{l}.weight={}", encode(&mlp.params()[wr]))?;
        writeln!(w, "layer{l}.bias={}", encode(&mlp.params()[br]))?;
    }
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

fn split_kv(line: &str) -> Result<(&str, &str)> {
    line.split_once('=')
        .ok_or_else(|| Error::Format(format!("expected key=value, got {line:?}")))
}

fn parse_f64(s: &str, key: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{key}: cannot parse {s:?}")))
}

pub fn read_model<R: Read>(r: R) -> Result<MlpModel> {
    let mut lines = BufReader::new(r).lines();
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty model file".into()))?;
    let version = first
        .strip_prefix(MODEL_MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Format("not a deepode model file".into()))?;
    if version != format!("v{MODEL_VERSION}") {
        return Err(Error::Format(format!(
            "unsupported model version {version:?}, expected v{MODEL_VERSION}"
        )));
    }

    let mut header = HashMap::new();
    let mut saw_separator = false;
    for line in lines.by_ref() {
        let line = line?;
        if line == "---" {
            saw_separator = true;
            break;
        }
        let (k, v) = split_kv(&line)?;
        header.insert(k.to_string(), v.to_string());
    }
    if !saw_separator {
        return Err(Error::Format("model header is truncated".into()));
    }
    let get = |k: &str| {
        header
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing header field {k}")))
    };

    let activation = get("activation")?;
    if activation != ACTIVATION {
        return Err(Error::Format(format!("unsupported activation {activation:?}")));
    }
    let sizes: Vec<usize> = get("layer_sizes")?
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format("layer_sizes: bad integer".into()))?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Format(format!("layer_sizes: invalid {sizes:?}")));
    }
    let (in_dim, out_dim) = (sizes[0], sizes[sizes.len() - 1]);
    let dt = parse_f64(get("dt")?, "dt")?;
    let autonomous = match get("autonomous")? {
        "1" => true,
        "0" => false,
        other => return Err(Error::Format(format!("autonomous: expected 0 or 1, got {other:?}"))),
    };
    let forcing_period = match get("forcing_period")? {
        "none" => None,
        s => Some(parse_f64(s, "forcing_period")?),
    };
    let train_seed = get("train_seed")?
        .parse()
        .map_err(|_| Error::Format("train_seed: bad integer".into()))?;
    let bct_mask: Vec<bool> = get("bct_mask")?
        .split(',')
        .map(|s| match s.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            o => Err(Error::Format(format!("bct_mask: bad entry {o:?}"))),
        })
        .collect::<Result<_>>()?;
    if bct_mask.len() != in_dim {
        return Err(Error::Dimension {
            expected: in_dim,
            got: bct_mask.len(),
        });
    }
    let pre = Preprocessor {
        bct_mask,
        bct_lambda: parse_f64(get("bct_lambda")?, "bct_lambda")?,
        input_mean: decode(get("input_mean")?, in_dim, "input_mean")?,
        input_std: decode(get("input_std")?, in_dim, "input_std")?,
        label_mean: decode(get("label_mean")?, out_dim, "label_mean")?,
        label_std: decode(get("label_std")?, out_dim, "label_std")?,
    };

    let mut params = Vec::with_capacity(param_count(&sizes));
    for l in 0..sizes.len() - 1 {
        for (part, n) in [("weight", sizes[l] * sizes[l + 1]), ("bias", sizes[l + 1])] {
            let key = format!("layer{l}.{part}");
            let line = lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("truncated before {key}")))?;
            let (k, v) = split_kv(&line)?;
            if k != key {
                return Err(Error::Format(format!("expected {key}, found {k}")));
            }
            params.extend(decode(v, n, &key)?);
        }
    }
    match lines.next().transpose()? {
        Some(l) if l == "end" => {}
        _ => return Err(Error::Format("missing end marker".into())),
    }

    let mut model = MlpModel::new(Mlp::from_params(&sizes, params)?, pre, dt, autonomous, train_seed)?;
    model.system_name = get("system_name")?.to_string();
    model.forcing_period = forcing_period;
    Ok(model)
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_model(model, std::io::BufWriter::new(f))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    read_model(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MlpModel {
        let mlp = Mlp::kaiming_uniform(&[3, 5, 2], 9).unwrap();
        let mut pre = Preprocessor::identity(3, 2);
        pre.input_mean = vec![0.1, 1.0 / 3.0, -2.0];
        pre.label_std = vec![1e-7, 3.5];
        pre.bct_mask = vec![false, true, false];
        let mut m = MlpModel::new(mlp, pre, 1e-6, false, 42).unwrap();
        m.system_name = "ring_modulator".into();
        m.forcing_period = Some(1e-3);
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for cut in [10, text.len() / 2, text.len() - 5] {
            assert!(matches!(read_model(&text.as_bytes()[..cut]), Err(Error::Format(_))));
        }
        let bad = text.replace("#deepode-model v1", "#deepode-model v9");
        assert!(matches!(read_model(bad.as_bytes()), Err(Error::Format(_))));
        let bad = text.replace("layer_sizes=3,5,2", "layer_sizes=3,6,2");
        assert!(read_model(bad.as_bytes()).is_err());
    }
}
