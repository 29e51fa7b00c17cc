//! Artifact serialization: binary PPM images and CSV reports.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::analysis::{PerturbationReport, SimilarityCurve};
use crate::error::{Error, Result};
use crate::model::IMAGE_CHANNELS;
use crate::search::RankedStrategy;
use crate::tensor::DenseArray;

/// Binary P6, maxval 255, each channel `round(v·255)` of the `[3,H,W]`
/// image, interleaved row-major.
pub fn write_ppm<W: Write>(img: &DenseArray, out: &mut W) -> Result<()> {
    let [c, h, w] = match img.dims() {
        [c, h, w] => [*c, *h, *w],
        d => return Err(Error::Dimension(format!("PPM needs [3,H,W], got {d:?}"))),
    };
    if c != IMAGE_CHANNELS {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((img.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = String::new();
                r.read_line(&mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            b => tok.push(b as char),
        }
    }
}

/// Inverse of [`write_ppm`]: pixel `b` becomes `b/255`.
pub fn read_ppm<R: BufRead>(r: &mut R) -> Result<DenseArray> {
    let bad = |m: &str| Error::Dimension(format!("PPM: {m}"));
    if header_token(r)? != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let w: usize = header_token(r)?.parse().map_err(|_| bad("width"))?;
    let h: usize = header_token(r)?.parse().map_err(|_| bad("height"))?;
    if header_token(r)? != "255" {
        return Err(bad("maxval must be 255"));
    }
    let plane = w * h;
    let mut bytes = vec![0u8; 3 * plane];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = bytes[3 * i + ch] as f32 / 255.0;
        }
    }
    DenseArray::from_vec(&[3, h, w], data)
}

/// Snap an image to the values a PPM round trip can represent.
pub fn quantize_8bit(img: &DenseArray) -> DenseArray {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SimilarityRow {
    step: usize,
    site_kind: &'static str,
    mean: f64,
    std: f64,
}

/// Columns `step,site_kind,mean,std`.
pub fn write_similarity_csv<W: Write>(curve: &SimilarityCurve, out: W) -> Result<()> {
    write_rows(
        out,
        curve.points.iter().flat_map(|p| {
            [
                SimilarityRow { step: p.step, site_kind: "self", mean: p.self_mean, std: p.self_std },
                SimilarityRow { step: p.step, site_kind: "cross", mean: p.cross_mean, std: p.cross_std },
            ]
        }),
    )
}

#[derive(Serialize)]
struct SweepRow {
    step: usize,
    mean_dev: f64,
    std_dev: f64,
    fitted: Option<f64>,
}

/// Columns `step,mean_dev,std_dev,fitted` (`fitted` empty without a fit).
pub fn write_sweep_csv<W: Write>(report: &PerturbationReport, out: W) -> Result<()> {
    write_rows(
        out,
        report.points.iter().map(|p| SweepRow { step: p.step, mean_dev: p.mean_dev, std_dev: p.std_dev, fitted: p.fitted }),
    )
}

#[derive(Serialize)]
struct RankRow<'a> {
    rank: usize,
    strategy: &'a crate::reuse::StrategyVector,
    utility_db: f64,
}

/// Columns `rank,strategy,utility_db`, best first.
pub fn write_ranked_csv<W: Write>(ranked: &[RankedStrategy], out: W) -> Result<()> {
    write_rows(
        out,
        ranked.iter().enumerate().map(|(i, r)| RankRow { rank: i + 1, strategy: &r.strategy, utility_db: r.utility_db }),
    )
}
