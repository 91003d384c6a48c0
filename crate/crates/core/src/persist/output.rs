use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::distill::{LossRow, TeacherRow};
use crate::error::Result;
use crate::netkit::Cond;
use crate::scalar::{to_f64, Point, Scalar};

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(res?)
}

/// Streaming distillation loss log.
pub struct LossCsv<W: Write> {
    out: W,
}

impl LossCsv<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> LossCsv<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(b"step,l_pcm,l_adv_gen,l_adv_disc,grad_norm\n")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, r: &LossRow) -> Result<()> {
        writeln!(self.out, "{},{},{},{},{}", r.step, r.l_pcm, r.l_adv_gen, r.l_adv_disc, r.grad_norm)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming teacher loss log.
pub struct TeacherCsv<W: Write> {
    out: W,
}

impl TeacherCsv<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> TeacherCsv<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(b"step,loss,grad_norm\n")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, r: &TeacherRow) -> Result<()> {
        writeln!(self.out, "{},{},{}", r.step, r.loss, r.grad_norm)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Sample table with columns `index,x,y,class,seed`; the null condition is
/// written as an empty class field.
pub fn write_samples_csv<S: Scalar, W: Write>(out: &mut W, pts: &[Point<S>], c: Cond, seed: u64) -> Result<()> {
    let class = c.class().map(|k| k.to_string()).unwrap_or_default();
    let mut s = String::with_capacity(32 * pts.len() + 24);
    s.push_str("index,x,y,class,seed\n");
    for (i, p) in pts.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{class},{seed}", to_f64(p[0]), to_f64(p[1]));
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Scatter plot on a 640x640 canvas; axes fit the bounding box plus a 10%
/// margin. `labels[i]` picks the colour of point `i` (gray for `None`).
pub fn render_svg<S: Scalar>(pts: &[Point<S>], labels: &[Option<usize>]) -> String {
    const SIZE: f64 = 640.0;
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (to_f64(p[0]), to_f64(p[1]))).collect();
    let fold = |f: fn(&(f64, f64)) -> f64| {
        xy.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let span = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() {
            (-1.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            let m = 0.1 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = span(fold(|p| p.0));
    let (y0, y1) = span(fold(|p| p.1));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"640\" viewBox=\"0 0 640 640\">"
    );
    s.push_str("<rect width=\"640\" height=\"640\" fill=\"white\"/>\n");
    for (i, &(x, y)) in xy.iter().enumerate() {
        let cx = (x - x0) / (x1 - x0) * SIZE;
        let cy = SIZE - (y - y0) / (y1 - y0) * SIZE;
        let fill = match labels.get(i).copied().flatten() {
            Some(k) => PALETTE[k % PALETTE.len()],
            None => "#7f7f7f",
        };
        let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" fill=\"{fill}\"/>");
    }
    s.push_str("</svg>\n");
    s
}
