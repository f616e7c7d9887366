//! Decoder-to-BOS attention traces, their per-token aggregation and
//! heatmap export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of BOS entries kept per generated token.
pub const DEFAULT_TOP_K: usize = 16;

/// Hierarchical attention recorded while generating one sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Generated tokens (EOS included); step `t` produced `tokens[t]`.
    pub tokens: Vec<u32>,
    /// `weights[layer][head][step][bos]`
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// `(heads, steps, num_bos)` of the first layer.
    pub fn dims(&self) -> (usize, usize, usize) {
        let heads = self.weights.first().map_or(0, Vec::len);
        let steps = self
            .weights
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len);
        let bos = self
            .weights
            .first()
            .and_then(|l| l.first())
            .and_then(|h| h.first())
            .map_or(0, Vec::len);
        (heads, steps, bos)
    }

    /// Checks the array is rectangular and every row is a distribution.
    pub fn validate(&self) -> Result<()> {
        let (heads, steps, bos) = self.dims();
        if heads == 0 || steps == 0 || bos == 0 {
            return Err(Error::invalid("attention trace is empty"));
        }
        for (l, layer) in self.weights.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::invalid(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.len()
                )));
            }
            for (h, head) in layer.iter().enumerate() {
                if head.len() != steps {
                    return Err(Error::invalid(format!(
                        "layer {l} head {h}: ragged step axis"
                    )));
                }
                for (t, row) in head.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.len() != bos
                        || row.iter().any(|w| !(*w >= 0.0))
                        || (sum - 1.0).abs() > 1e-6
                    {
                        return Err(Error::invalid(format!(
                            "layer {l} head {h} step {t}: not a distribution over {bos} BOS tokens"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), self)
            .map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let t: AttentionTrace = serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        t.validate()?;
        Ok(t)
    }
}

/// Per-layer `[bos][step]` weights; each column is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn num_bos(&self) -> usize {
        self.matrix.len()
    }

    pub fn steps(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        self.matrix.iter().map(|row| row[t]).collect()
    }
}

/// Head-mean, then keep the `k` largest BOS weights per generated token
/// (lower index wins ties), zero the rest and renormalize.
pub fn aggregate(trace: &AttentionTrace, layer: usize, k: usize) -> Result<Heatmap> {
    let heads = trace.weights.get(layer).ok_or_else(|| {
        Error::invalid(format!(
            "layer {layer} out of range ({} recorded)",
            trace.num_layers()
        ))
    })?;
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    let (_, steps, num_bos) = trace.dims();
    let mut matrix = vec![vec![0.0; steps]; num_bos];
    for t in 0..steps {
        let mean: Vec<f64> = (0..num_bos)
            .map(|b| heads.iter().map(|h| h[t][b]).sum::<f64>() / heads.len() as f64)
            .collect();
        let mut order: Vec<usize> = (0..num_bos).collect();
        order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
        order.truncate(k);
        let total: f64 = order.iter().map(|&b| mean[b]).sum();
        for &b in &order {
            matrix[b][t] = if total > 0.0 {
                mean[b] / total
            } else {
                1.0 / order.len() as f64
            };
        }
    }
    Ok(Heatmap { layer, matrix })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Csv => "csv",
            HeatmapFormat::Pgm => "pgm",
        }
    }
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            other => Err(Error::invalid(format!("unknown heatmap format `{other}`"))),
        }
    }
}

pub fn export_heatmap(map: &Heatmap, path: &Path, format: HeatmapFormat) -> Result<()> {
    match format {
        HeatmapFormat::Csv => write_csv(map, path),
        HeatmapFormat::Pgm => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(&pgm_bytes(map))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))
        }
    }
}

/// `{prefix}.layer{i}.{ext}`
pub fn heatmap_path(prefix: &Path, layer: usize, format: HeatmapFormat) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(format!(".layer{layer}.{}", format.extension()));
    PathBuf::from(name)
}

/// Aggregates and writes the given layers (all when `layers` is empty).
pub fn export_trace(
    trace: &AttentionTrace,
    prefix: &Path,
    layers: &[usize],
    k: usize,
    format: HeatmapFormat,
) -> Result<Vec<PathBuf>> {
    let all: Vec<usize> = (0..trace.num_layers()).collect();
    let layers = if layers.is_empty() { &all[..] } else { layers };
    layers
        .iter()
        .map(|&l| {
            let path = heatmap_path(prefix, l, format);
            export_heatmap(&aggregate(trace, l, k)?, &path, format)?;
            Ok(path)
        })
        .collect()
}

fn write_csv(map: &Heatmap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..map.steps()).map(|t| t.to_string()))?;
    for row in &map.matrix {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Re-parses a heatmap CSV into `[bos][step]`.
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let steps = r.headers()?.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| {
                    Error::invalid(format!("{}: bad weight `{s}`: {e}", path.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != steps {
            return Err(Error::invalid(format!("{}: ragged row", path.display())));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Binary P5 image, one column per step and one row per BOS token,
/// brightness `round(255·w/max_w)`.
pub fn pgm_bytes(map: &Heatmap) -> Vec<u8> {
    let max = map.matrix.iter().flatten().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", map.steps(), map.num_bos()).into_bytes();
    for row in &map.matrix {
        out.extend(row.iter().map(|&w| {
            if max > 0.0 {
                (255.0 * w / max).round() as u8
            } else {
                0
            }
        }));
    }
    out
}

/// A decoded P5 image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Parses an 8-bit binary PGM.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |m: &str| Error::invalid(format!("invalid PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("non-numeric header field"))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != width * height {
        return Err(bad("raster size does not match dimensions"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: pixels.to_vec(),
    })
}
