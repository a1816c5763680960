use std::fmt::Write as _;
use std::io::{self, Write};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Deform,
    Superpixel,
    Init,
    Extract,
    Fuse,
    Insert,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Deform,
        Stage::Superpixel,
        Stage::Init,
        Stage::Extract,
        Stage::Fuse,
        Stage::Insert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Deform => "deform",
            Stage::Superpixel => "superpixel",
            Stage::Init => "init",
            Stage::Extract => "extract",
            Stage::Fuse => "fuse",
            Stage::Insert => "insert",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Measurements for one processed frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameRecord {
    pub frame_index: usize,
    /// Wall-clock milliseconds per stage, indexed by [`Stage::index`].
    pub stage_ms: [f64; 6],
    /// Map size after the frame.
    pub surfel_count: usize,
    pub local_count: usize,
    pub new_count: usize,
    pub fused_count: usize,
    pub pruned_count: usize,
    /// Surfel storage plus the frame's image buffers.
    pub memory_bytes: usize,
}

impl FrameRecord {
    pub fn stage(&self, s: Stage) -> f64 {
        self.stage_ms[s.index()]
    }

    pub fn total_ms(&self) -> f64 {
        self.stage_ms.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfReport {
    pub frames: Vec<FrameRecord>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl PerfReport {
    pub fn push(&mut self, r: FrameRecord) {
        self.frames.push(r);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn stage_mean(&self, s: Stage) -> Option<f64> {
        (!self.is_empty()).then(|| self.frames.iter().map(|f| f.stage(s)).sum::<f64>() / self.len() as f64)
    }

    pub fn total_mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.frames.iter().map(FrameRecord::total_ms).sum::<f64>() / self.len() as f64)
    }

    /// Median of a stage over processed frames `pos - half ..= pos + half`
    /// (positions in processing order, clipped to the run).
    pub fn windowed_median(&self, s: Stage, pos: usize, half: usize) -> Option<f64> {
        if pos >= self.len() {
            return None;
        }
        let lo = pos.saturating_sub(half);
        let hi = (pos + half).min(self.len() - 1);
        median(self.frames[lo..=hi].iter().map(|f| f.stage(s)).collect())
    }

    pub fn surfel_count_at(&self, pos: usize) -> Option<usize> {
        self.frames.get(pos).map(|f| f.surfel_count)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "frame")?;
        for s in Stage::ALL {
            write!(w, ",{}_ms", s.name())?;
        }
        writeln!(w, ",total_ms,surfels,local,new,fused,pruned,memory_bytes")?;
        for f in &self.frames {
            write!(w, "{}", f.frame_index)?;
            for v in f.stage_ms {
                write!(w, ",{v:.4}")?;
            }
            writeln!(
                w,
                ",{:.4},{},{},{},{},{},{}",
                f.total_ms(),
                f.surfel_count,
                f.local_count,
                f.new_count,
                f.fused_count,
                f.pruned_count,
                f.memory_bytes
            )?;
        }
        Ok(())
    }

    /// Mean and median per stage plus final map size.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let Some(last) = self.frames.last() else {
            return "no frames processed\n".into();
        };
        let _ = writeln!(out, "frames processed: {}", self.len());
        let _ = writeln!(out, "{:<12} {:>10} {:>10}", "stage", "mean ms", "median ms");
        for s in Stage::ALL {
            let med = median(self.frames.iter().map(|f| f.stage(s)).collect()).unwrap_or(0.0);
            let _ = writeln!(out, "{:<12} {:>10.3} {:>10.3}", s.name(), self.stage_mean(s).unwrap_or(0.0), med);
        }
        let _ = writeln!(out, "{:<12} {:>10.3}", "total", self.total_mean().unwrap_or(0.0));
        let _ = writeln!(out, "final surfels: {}", last.surfel_count);
        let _ = writeln!(out, "memory estimate: {:.1} MiB", last.memory_bytes as f64 / (1024.0 * 1024.0));
        out
    }
}
