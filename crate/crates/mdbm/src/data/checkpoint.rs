//! Checkpoint container: a versioned textual key-value header followed by a
//! little-endian raw `f64` payload, so parameters round-trip bitwise and the
//! header stays diff-able.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linops::{BlockSpec, BlockWeights, LayerSpec};
use crate::model::{Arch, MdbmModel};
use crate::rbm::DeepRbm;

const MAGIC_LINE: &str = "MDBM-CHECKPOINT v1";

struct HeaderWriter {
    lines: Vec<String>,
}

impl HeaderWriter {
    fn new() -> Self {
        Self {
            lines: vec![MAGIC_LINE.to_string()],
        }
    }

    fn push(&mut self, line: String) {
        self.lines.push(line);
    }
}

fn block_line(spec: &BlockSpec) -> String {
    match spec {
        BlockSpec::Dense {
            in_layer,
            out_layer,
            rows,
            cols,
        } => format!("block dense {in_layer} {out_layer} {rows} {cols}"),
        BlockSpec::Conv2d {
            in_layer,
            out_layer,
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
        } => format!(
            "block conv2d {in_layer} {out_layer} {out_channels} {in_channels} {kernel} {stride} {padding}"
        ),
    }
}

fn write_file(path: &Path, header: HeaderWriter, payload: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for line in &header.lines {
        writeln!(f, "{line}")?;
    }
    writeln!(f, "end")?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Serialize a full model (architecture, weights, biases, temperatures).
pub fn save_checkpoint(model: &MdbmModel, path: &Path) -> Result<()> {
    let mut h = HeaderWriter::new();
    h.push("kind mdbm".to_string());
    h.push(format!("monotone {}", model.monotone_mode as u8));
    h.push(format!("margin {}", hexf(model.arch.margin)));
    h.push(format!("pixel_layer {}", model.arch.pixel_layer));
    h.push(format!(
        "label_layer {}",
        model
            .arch
            .label_layer
            .map(|l| l.to_string())
            .unwrap_or_else(|| "none".to_string())
    ));
    h.push(format!("layers {}", model.arch.layers.len()));
    for l in &model.arch.layers {
        h.push(format!("layer {} {} {} {}", l.channels, l.height, l.width, l.groups));
    }
    h.push(format!("blocks {}", model.arch.blocks.len()));
    for b in &model.arch.blocks {
        h.push(block_line(b));
    }
    let mut payload = Vec::new();
    let mut manifest = Vec::new();
    let mut offset = 0usize;
    for (i, block) in model.weights.blocks().iter().enumerate() {
        manifest.push(format!("param block{i} {offset} {}", block.weights.len()));
        offset += block.weights.len();
        payload.extend_from_slice(&block.weights);
    }
    manifest.push(format!("param bias {offset} {}", model.bias.len()));
    offset += model.bias.len();
    payload.extend_from_slice(&model.bias);
    manifest.push(format!("param log_temp {offset} {}", model.log_temp.len()));
    offset += model.log_temp.len();
    payload.extend_from_slice(&model.log_temp);
    h.push(format!("params {} {}", manifest.len(), offset));
    for m in manifest {
        h.push(m);
    }
    write_file(path, h, &payload)
}

/// Exact float serialization for header values that must round-trip.
fn hexf(v: f64) -> String {
    format!("{:#018x}", v.to_bits())
}

fn parse_hexf(s: &str, line_no: usize) -> Result<f64> {
    let t = s.trim_start_matches("0x");
    u64::from_str_radix(t, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::parse(format!("line {line_no}: bad float bits {s}")))
}

struct Header {
    fields: Vec<(usize, String)>,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut fields = Vec::new();
    let mut pos = 0usize;
    let mut line_no = 0usize;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| {
                Error::parse(format!(
                    "{}: header is not terminated by an 'end' line",
                    path.display()
                ))
            })?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::parse(format!("line {}: not utf-8", line_no + 1)))?
            .to_string();
        pos += end + 1;
        line_no += 1;
        if line_no == 1 {
            if line != MAGIC_LINE {
                return Err(Error::parse(format!(
                    "line 1: unrecognized checkpoint version '{line}'"
                )));
            }
            continue;
        }
        if line == "end" {
            return Ok(Header {
                fields,
                payload_start: pos,
            });
        }
        fields.push((line_no, line));
    }
}

struct FieldReader {
    fields: Vec<(usize, String)>,
    idx: usize,
}

impl FieldReader {
    fn next(&mut self, key: &str) -> Result<(usize, Vec<String>)> {
        let (no, line) = self.fields.get(self.idx).ok_or_else(|| {
            Error::parse(format!("checkpoint header ended while expecting '{key}'"))
        })?;
        self.idx += 1;
        let mut parts = line.split_whitespace().map(|s| s.to_string());
        let head = parts.next().unwrap_or_default();
        if head != key {
            return Err(Error::parse(format!(
                "line {no}: expected '{key}', found '{head}'"
            )));
        }
        Ok((*no, parts.collect()))
    }
}

fn parse_usize(s: &str, line_no: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(format!("line {line_no}: bad integer '{s}'")))
}

fn read_payload(bytes: &[u8], start: usize, expect: usize) -> Result<Vec<f64>> {
    let body = &bytes[start..];
    if body.len() != expect * 8 {
        return Err(Error::parse(format!(
            "payload mismatch: manifest declares {expect} values ({} bytes), file holds {}",
            expect * 8,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

/// Load a model checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<MdbmModel> {
    let bytes = fs::read(path)?;
    let header = parse_header(&bytes, path)?;
    let mut r = FieldReader {
        fields: header.fields,
        idx: 0,
    };
    let (no, kind) = r.next("kind")?;
    if kind.first().map(String::as_str) != Some("mdbm") {
        return Err(Error::parse(format!(
            "line {no}: checkpoint kind {:?} is not an mdbm model",
            kind.first()
        )));
    }
    let (_, mono) = r.next("monotone")?;
    let monotone = mono.first().map(String::as_str) == Some("1");
    let (no, margin) = r.next("margin")?;
    let margin = parse_hexf(margin.first().map(String::as_str).unwrap_or(""), no)?;
    let (no, pl) = r.next("pixel_layer")?;
    let pixel_layer = parse_usize(pl.first().map(String::as_str).unwrap_or(""), no)?;
    let (no, ll) = r.next("label_layer")?;
    let label_layer = match ll.first().map(String::as_str) {
        Some("none") => None,
        Some(s) => Some(parse_usize(s, no)?),
        None => return Err(Error::parse(format!("line {no}: missing label_layer"))),
    };
    let (no, nl) = r.next("layers")?;
    let n_layers = parse_usize(nl.first().map(String::as_str).unwrap_or(""), no)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (no, f) = r.next("layer")?;
        if f.len() != 4 {
            return Err(Error::parse(format!("line {no}: layer needs 4 fields")));
        }
        layers.push(LayerSpec::new(
            parse_usize(&f[0], no)?,
            parse_usize(&f[1], no)?,
            parse_usize(&f[2], no)?,
            parse_usize(&f[3], no)?,
        ));
    }
    let (no, nb) = r.next("blocks")?;
    let n_blocks = parse_usize(nb.first().map(String::as_str).unwrap_or(""), no)?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let (no, f) = r.next("block")?;
        let spec = match f.first().map(String::as_str) {
            Some("dense") if f.len() == 5 => BlockSpec::Dense {
                in_layer: parse_usize(&f[1], no)?,
                out_layer: parse_usize(&f[2], no)?,
                rows: parse_usize(&f[3], no)?,
                cols: parse_usize(&f[4], no)?,
            },
            Some("conv2d") if f.len() == 8 => BlockSpec::Conv2d {
                in_layer: parse_usize(&f[1], no)?,
                out_layer: parse_usize(&f[2], no)?,
                out_channels: parse_usize(&f[3], no)?,
                in_channels: parse_usize(&f[4], no)?,
                kernel: parse_usize(&f[5], no)?,
                stride: parse_usize(&f[6], no)?,
                padding: parse_usize(&f[7], no)?,
            },
            other => {
                return Err(Error::parse(format!(
                    "line {no}: unrecognized block kind {other:?}"
                )))
            }
        };
        blocks.push(spec);
    }
    let (no, pcount) = r.next("params")?;
    if pcount.len() != 2 {
        return Err(Error::parse(format!("line {no}: params needs 2 fields")));
    }
    let n_params = parse_usize(&pcount[0], no)?;
    let total = parse_usize(&pcount[1], no)?;
    let mut manifest = Vec::with_capacity(n_params);
    let mut tiled = 0usize;
    for _ in 0..n_params {
        let (no, f) = r.next("param")?;
        if f.len() != 3 {
            return Err(Error::parse(format!("line {no}: param needs 3 fields")));
        }
        let offset = parse_usize(&f[1], no)?;
        let len = parse_usize(&f[2], no)?;
        if offset != tiled {
            return Err(Error::parse(format!(
                "line {no}: manifest offsets do not tile the payload (expected {tiled}, got {offset})"
            )));
        }
        tiled += len;
        manifest.push((f[0].clone(), offset, len));
    }
    if tiled != total {
        return Err(Error::parse(format!(
            "manifest covers {tiled} values but declares {total}"
        )));
    }
    let payload = read_payload(&bytes, header.payload_start, total)?;

    let arch = Arch {
        layers: layers.clone(),
        blocks: blocks.clone(),
        margin,
        pixel_layer,
        label_layer,
    };
    let mut block_weights = Vec::with_capacity(blocks.len());
    let mut cursor = 0usize;
    for (i, spec) in blocks.iter().enumerate() {
        let (name, offset, len) = &manifest[i];
        if name != &format!("block{i}") || *len != spec.param_len() {
            return Err(Error::parse(format!(
                "manifest entry {i} ({name}) does not match block shape"
            )));
        }
        block_weights.push((spec.clone(), payload[*offset..offset + len].to_vec()));
        cursor = offset + len;
    }
    let mut weights = BlockWeights::new(layers, block_weights, margin)?;
    if monotone {
        weights.normalize_in_place()?;
    }
    let (bname, boff, blen) = &manifest[blocks.len()];
    if bname != "bias" || *boff != cursor {
        return Err(Error::parse("manifest bias entry out of order".to_string()));
    }
    let bias = payload[*boff..boff + blen].to_vec();
    let (tname, toff, tlen) = &manifest[blocks.len() + 1];
    if tname != "log_temp" {
        return Err(Error::parse("manifest log_temp entry missing".to_string()));
    }
    let log_temp = payload[*toff..toff + tlen].to_vec();
    let model = MdbmModel {
        arch,
        weights,
        bias,
        log_temp,
        monotone_mode: monotone,
    };
    if model.bias.len() != model.total_len() || model.log_temp.len() != model.n_vars() {
        return Err(Error::parse(
            "checkpoint parameter lengths do not match the architecture".to_string(),
        ));
    }
    Ok(model)
}

/// Serialize the deep RBM baseline in the same container with a distinct
/// architecture kind tag.
pub fn save_rbm_checkpoint(rbm: &DeepRbm, path: &Path) -> Result<()> {
    let mut h = HeaderWriter::new();
    h.push("kind rbm".to_string());
    h.push(format!(
        "rbm_layers {}",
        rbm.layer_sizes()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    let mut payload = Vec::new();
    let mut manifest = Vec::new();
    let mut offset = 0usize;
    for (i, w) in rbm.weights().iter().enumerate() {
        manifest.push(format!("param weights{i} {offset} {}", w.len()));
        offset += w.len();
        payload.extend_from_slice(w);
    }
    for (i, b) in rbm.biases().iter().enumerate() {
        manifest.push(format!("param bias{i} {offset} {}", b.len()));
        offset += b.len();
        payload.extend_from_slice(b);
    }
    h.push(format!("params {} {}", manifest.len(), offset));
    for m in manifest {
        h.push(m);
    }
    write_file(path, h, &payload)
}

pub fn load_rbm_checkpoint(path: &Path) -> Result<DeepRbm> {
    let bytes = fs::read(path)?;
    let header = parse_header(&bytes, path)?;
    let mut r = FieldReader {
        fields: header.fields,
        idx: 0,
    };
    let (no, kind) = r.next("kind")?;
    if kind.first().map(String::as_str) != Some("rbm") {
        return Err(Error::parse(format!(
            "line {no}: checkpoint kind {:?} is not an rbm",
            kind.first()
        )));
    }
    let (no, ls) = r.next("rbm_layers")?;
    let sizes: Vec<usize> = ls
        .iter()
        .map(|s| parse_usize(s, no))
        .collect::<Result<_>>()?;
    let (no, pcount) = r.next("params")?;
    let n_params = parse_usize(&pcount[0], no)?;
    let total = parse_usize(&pcount[1], no)?;
    let mut manifest = Vec::new();
    for _ in 0..n_params {
        let (no, f) = r.next("param")?;
        manifest.push((f[0].clone(), parse_usize(&f[1], no)?, parse_usize(&f[2], no)?));
    }
    let payload = read_payload(&bytes, header.payload_start, total)?;
    let n_pairs = sizes.len() - 1;
    let mut weights = Vec::new();
    for i in 0..n_pairs {
        let (name, off, len) = &manifest[i];
        if name != &format!("weights{i}") || *len != sizes[i] * sizes[i + 1] {
            return Err(Error::parse(format!("manifest weights{i} mismatch")));
        }
        weights.push(payload[*off..off + len].to_vec());
    }
    let mut biases = Vec::new();
    for i in 0..sizes.len() {
        let (name, off, len) = &manifest[n_pairs + i];
        if name != &format!("bias{i}") || *len != sizes[i] {
            return Err(Error::parse(format!("manifest bias{i} mismatch")));
        }
        biases.push(payload[*off..off + len].to_vec());
    }
    DeepRbm::from_parts(sizes, weights, biases)
}
