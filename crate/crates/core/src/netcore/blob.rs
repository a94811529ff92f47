//! Binary parameter files: a short text header terminated by an
//! `end_header` line, followed by `count` little-endian `f64` values.
//!
//! ```text
//! twoscale-ocp blob
//! layer_sizes = 5,50,50,50,1
//! activation = tanh
//! flatten_version = 1
//! count = 5351
//! end_header
//! <5351 x 8 bytes>
//! ```

use std::fs;
use std::path::Path;

use super::mlp::{Activation, MlpParams, FLATTEN_VERSION};
use crate::error::{Error, Result};

const MAGIC: &str = "twoscale-ocp blob";
const END: &str = "end_header";

pub fn encode_blob(header: &[(&str, String)], data: &[f64]) -> Vec<u8> {
    let mut text = format!("{MAGIC}\n");
    for (k, v) in header {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!("count = {}\n{END}\n", data.len()));
    let mut bytes = text.into_bytes();
    bytes.reserve(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Header entries (excluding `count`) and payload.
pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<(Vec<(String, String)>, Vec<f64>)> {
    let load_err = |line: u64, msg: &str| Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut header = Vec::new();
    let mut count = None;
    let mut line_no = 0u64;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| load_err(line_no + 1, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| load_err(line_no + 1, "header is not UTF-8"))?;
        pos += nl + 1;
        line_no += 1;
        if line_no == 1 {
            if line != MAGIC {
                return Err(load_err(1, "not a parameter blob"));
            }
            continue;
        }
        if line == END {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| load_err(line_no, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "count" {
            count = Some(v.parse::<usize>().map_err(|_| load_err(line_no, "bad count"))?);
        } else {
            header.push((k.to_string(), v.to_string()));
        }
    }
    let count = count.ok_or_else(|| load_err(line_no, "missing count"))?;
    let payload = &bytes[pos..];
    if payload.len() != count * 8 {
        return Err(load_err(
            line_no,
            &format!("payload has {} bytes, header promises {}", payload.len(), count * 8),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

pub fn params_to_bytes(params: &MlpParams) -> Vec<u8> {
    let sizes = params
        .layer_sizes()
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    encode_blob(
        &[
            ("layer_sizes", sizes),
            ("activation", params.activation().name().to_string()),
            ("flatten_version", FLATTEN_VERSION.to_string()),
        ],
        params.as_slice(),
    )
}

pub fn params_from_bytes(bytes: &[u8], path: &Path) -> Result<MlpParams> {
    let (header, data) = decode_blob(bytes, path)?;
    let get = |key: &str| {
        header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Load {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("missing header key `{key}`"),
            })
    };
    let bad = |msg: String| Error::Load {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    let sizes = get("layer_sizes")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad layer_sizes: {e}")))?;
    let act = get("activation")?;
    if Activation::parse(act).is_none() {
        return Err(bad(format!("unsupported activation `{act}`")));
    }
    let version = get("flatten_version")?;
    if version != FLATTEN_VERSION.to_string() {
        return Err(bad(format!("unsupported flatten_version {version}")));
    }
    MlpParams::from_flat(&sizes, data)
}

pub fn save_params(params: &MlpParams, path: &Path) -> Result<()> {
    fs::write(path, params_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<MlpParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes, path)
}
