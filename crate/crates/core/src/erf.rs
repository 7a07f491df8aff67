//! Effective receptive field measurement.
//!
//! For each input sample the summed central activations of the final feature
//! map (every channel, position `(h'/2, w'/2)`) are differentiated with respect
//! to the input. Negative gradients are clamped to zero and the result is
//! summed over samples and input channels into `raw`. The contribution map is
//! `A = log10(raw + 1)` rescaled so that its maximum is 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::conv::Backend;
use crate::error::{Error, Result};
use crate::model::{input_gradient, LayerGraph, ModelWeights};
use crate::tensor::{Grid, Shape, Tensor};

/// The thresholds reported by default: 20%, 30%, 50% and 99%.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.2, 0.3, 0.5, 0.99];
pub const AREA_CSV_HEADER: &str = "threshold,side,ratio";

#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    /// Log-scaled contribution scores in `[0, 1]`.
    pub a: Grid,
    /// Clamped gradient mass summed over samples and channels.
    pub raw: Grid,
    pub n_samples: usize,
    pub input_size: (usize, usize),
    /// True when `raw` is identically zero.
    pub degenerate: bool,
}

impl ErfMap {
    /// Builds the map from an already aggregated nonnegative `raw` grid.
    pub fn from_raw(raw: Grid, n_samples: usize) -> Result<Self> {
        if raw.data.iter().any(|&v| v.is_nan() || v < 0.0 || !v.is_finite()) {
            return Err(Error::param("raw contribution scores must be finite and nonnegative"));
        }
        let logged: Vec<f64> = raw
            .data
            .iter()
            .map(|&v| (v as f64).ln_1p() / std::f64::consts::LN_10)
            .collect();
        let max = logged.iter().copied().fold(0.0f64, f64::max);
        let degenerate = max == 0.0;
        let a = Grid {
            rows: raw.rows,
            cols: raw.cols,
            data: logged
                .iter()
                .map(|&v| if degenerate { 0.0 } else { (v / max) as f32 })
                .collect(),
        };
        let input_size = (raw.rows, raw.cols);
        Ok(ErfMap {
            a,
            raw,
            n_samples,
            input_size,
            degenerate,
        })
    }
}

/// Which grid the area ratio integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AreaSource {
    /// The clamped gradient mass before the log transform.
    #[default]
    Raw,
    /// The rescaled log map `A`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRow {
    pub threshold: f64,
    pub side: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AreaRatioReport {
    pub rows: Vec<AreaRow>,
}

impl AreaRatioReport {
    pub fn ratio_at(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.ratio)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{AREA_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.6}", r.threshold, r.side, r.ratio)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Computes the ERF of a headless graph over `inputs` (each a batch of one or
/// more samples). The per-sample maps are summed in input order.
pub fn compute_erf(graph: &LayerGraph, weights: &ModelWeights, inputs: &[Tensor], backend: Backend) -> Result<ErfMap> {
    if graph.has_head() {
        return Err(Error::Graph(
            "ERF needs a headless graph (build with with_head = false)".into(),
        ));
    }
    let first = inputs
        .first()
        .ok_or_else(|| Error::param("at least one input sample is required"))?;
    let (h, w) = (first.shape().h, first.shape().w);
    let mut raw = vec![0.0f64; h * w];
    let mut n_samples = 0;

    for x in inputs {
        let s = x.shape();
        if (s.h, s.w) != (h, w) {
            return Err(Error::shape(format!("all inputs must be {h}x{w}, got {s}")));
        }
        let shapes = graph.shapes(s)?;
        let out = shapes[graph.output];
        let mut seed = Tensor::zeros(out);
        for n in 0..out.n {
            for c in 0..out.c {
                seed.set(n, c, out.h / 2, out.w / 2, 1.0);
            }
        }
        let grad = input_gradient(graph, weights, x, &seed, backend)?;
        for n in 0..s.n {
            for c in 0..s.c {
                for (acc, &g) in raw.iter_mut().zip(grad.plane(n, c)) {
                    if g > 0.0 {
                        *acc += g as f64;
                    }
                }
            }
        }
        n_samples += s.n;
    }

    let raw = Grid {
        rows: h,
        cols: w,
        data: raw.into_iter().map(|v| v as f32).collect(),
    };
    ErfMap::from_raw(raw, n_samples)
}

/// Row/column span `[lo, lo + side)` of a square of `side` centred on
/// `centre` (with `centre = len / 2`), clipped to `len`.
fn centred_span(centre: usize, side: usize, len: usize) -> (usize, usize) {
    let lo = centre.saturating_sub(side / 2);
    let hi = (lo + side).min(len);
    (hi.saturating_sub(side), hi)
}

/// For each threshold `t`, the smallest centred square holding at least a
/// fraction `t` of the total contribution, and its share of the image area.
pub fn area_ratio(map: &ErfMap, thresholds: &[f64], source: AreaSource) -> Result<AreaRatioReport> {
    if map.degenerate {
        return Err(Error::Degenerate("contribution map is all zero".into()));
    }
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::param(format!("threshold {t} outside (0, 1]")));
    }
    let grid = match source {
        AreaSource::Raw => &map.raw,
        AreaSource::Log => &map.a,
    };
    let (h, w) = (grid.rows, grid.cols);

    // Summed-area table with a zero border.
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += grid.at(r, c) as f64;
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row;
        }
    }
    let total = sat[h * (w + 1) + w];
    let rect = |r0: usize, r1: usize, c0: usize, c1: usize| {
        sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0] + sat[r0 * (w + 1) + c0]
    };
    let max_side = h.min(w);
    let enclosed: Vec<f64> = (1..=max_side)
        .map(|side| {
            let (r0, r1) = centred_span(h / 2, side, h);
            let (c0, c1) = centred_span(w / 2, side, w);
            rect(r0, r1, c0, c1) / total
        })
        .collect();

    let rows = thresholds
        .iter()
        .map(|&t| {
            let side = enclosed.iter().position(|&f| f >= t).map_or(max_side, |i| i + 1);
            AreaRow {
                threshold: t,
                side,
                ratio: (side * side) as f64 / (h * w) as f64,
            }
        })
        .collect();
    Ok(AreaRatioReport { rows })
}

/// Comparative ERF index `K * sqrt(L)`.
pub fn theoretical_erf(kernel: usize, layers: usize) -> Result<f64> {
    if kernel == 0 || layers == 0 {
        return Err(Error::param("kernel size and depth must be at least 1"));
    }
    Ok(kernel as f64 * (layers as f64).sqrt())
}

/// Quantizes `A` to 8 bits, rounding half up.
pub fn quantize(a: &Grid) -> Vec<u8> {
    a.data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8)
        .collect()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes `A` as a binary PGM plus a `<path>.txt` sidecar with the map's
/// metadata (including whether it is degenerate).
pub fn render_heatmap(map: &ErfMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", map.a.cols, map.a.rows).into_bytes();
    bytes.extend(quantize(&map.a));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = format!(
        "degenerate={}\nsamples={}\ninput_size={}x{}\nraw_max={}\n",
        map.degenerate,
        map.n_samples,
        map.input_size.0,
        map.input_size.1,
        map.raw.max()
    );
    fs::write(&side, meta).map_err(|e| Error::io(side, e))
}

/// A decoded binary PGM (`P5`) or PPM (`P6`) image, values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Raw samples in file order (interleaved for PPM).
    pub samples: Vec<u16>,
}

impl Pnm {
    /// Planar `(1, channels, h, w)` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let shape = Shape::new(1, self.channels, self.height, self.width)?;
        let mut t = Tensor::zeros(shape);
        let scale = 1.0 / self.maxval as f32;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.samples[(y * self.width + x) * self.channels + c];
                    t.set(0, c, y, x, v as f32 * scale);
                }
            }
        }
        Ok(t)
    }

    /// Replicates a grayscale image to `channels` planes.
    pub fn to_tensor_channels(&self, channels: usize) -> Result<Tensor> {
        let t = self.to_tensor()?;
        if self.channels == channels {
            return Ok(t);
        }
        if self.channels != 1 {
            return Err(Error::Image(format!(
                "cannot map a {}-channel image to {channels} channels",
                self.channels
            )));
        }
        let shape = Shape::new(1, channels, self.height, self.width)?;
        let data = (0..channels).flat_map(|_| t.data().iter().copied()).collect();
        Tensor::from_vec(shape, data)
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Image(format!("unsupported magic `{other}` (want P5 or P6)"))),
    };
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad header number `{s}`")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Image("invalid dimensions or maxval".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let count = width * height * channels;
    let wide = maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    if bytes.len() < start + need {
        return Err(Error::Image(format!("raster truncated: need {need} bytes")));
    }
    let raster = &bytes[start..start + need];
    let samples = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Pnm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}
