//! Training and evaluation samples cut from a split archive.
//!
//! Each subset is stored as contiguous segments: a run of consecutive
//! targets `a..=b` becomes the archive frames `a - lead_count ..= b`, so every
//! target of the run has its full observation window inside one segment.
//! A sample is the window of `lead_count + 1` frames ending at its target;
//! the first `WINDOW` frames are inputs and the rest are verification leads.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::field::{DatasetSplit, FieldSequence};
use crate::stack::{channel_stack, read_stack, write_stack, FieldStack, UNITS_MOTION, UNITS_SOURCE};

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// Archive index of the first frame.
    pub start: usize,
    pub frames: FieldSequence,
    /// True motion per step (2 × H × W each), when known.
    pub motion: Option<Vec<Vec<f32>>>,
    /// True source-sink per step (H × W each), when known.
    pub source: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub segments: Vec<Segment>,
    /// Frames per sample window.
    pub span: usize,
    height: usize,
    width: usize,
    /// (segment, offset of the first window frame) per sample.
    index: Vec<(usize, usize)>,
}

impl Subset {
    pub fn new(segments: Vec<Segment>, span: usize) -> Result<Self> {
        let mut geometry = None;
        let mut index = Vec::new();
        for (k, s) in segments.iter().enumerate() {
            if let Some(gm) = s.frames.geometry() {
                if *geometry.get_or_insert(gm) != gm {
                    return Err(Error::DimensionMismatch(format!(
                        "segment {k} is {}x{}",
                        gm.0, gm.1
                    )));
                }
            }
            let n = s.frames.len();
            if n >= span {
                index.extend((0..=n - span).map(|o| (k, o)));
            }
        }
        let (height, width) = geometry.unwrap_or((0, 0));
        Ok(Subset {
            segments,
            span,
            height,
            width,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Archive index of each sample's target (last window frame).
    pub fn targets(&self) -> Vec<usize> {
        self.index
            .iter()
            .map(|&(s, o)| self.segments[s].start + o + self.span - 1)
            .collect()
    }

    /// Frames `from..from + count` of every listed sample's window, (B, count, H, W).
    pub fn frames(&self, samples: &[usize], from: usize, count: usize) -> Result<Tensor<f32>> {
        if from + count > self.span {
            return Err(Error::invalid(format!(
                "frames {from}..{} outside a {}-frame window",
                from + count,
                self.span
            )));
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(samples.len() * count * plane);
        for &i in samples {
            let (s, o) = *self
                .index
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample {i} of {}", self.len())))?;
            for k in 0..count {
                data.extend_from_slice(self.segments[s].frames.get(o + from + k).values());
            }
        }
        Tensor::from_vec([samples.len(), count, self.height, self.width], data)
    }

    /// Whole windows, (B, span, H, W).
    pub fn windows(&self, samples: &[usize]) -> Result<Tensor<f32>> {
        self.frames(samples, 0, self.span)
    }

    /// True motion of the step leaving window frame `step`, (B, 2, H, W).
    pub fn true_motion(&self, samples: &[usize], step: usize) -> Result<Option<Tensor<f32>>> {
        let plane = 2 * self.height * self.width;
        let mut data = Vec::with_capacity(samples.len() * plane);
        for &i in samples {
            let (s, o) = self.index[i];
            match &self.segments[s].motion {
                Some(m) => data.extend_from_slice(&m[o + step]),
                None => return Ok(None),
            }
        }
        Ok(Some(Tensor::from_vec(
            [samples.len(), 2, self.height, self.width],
            data,
        )?))
    }

    pub fn all_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.segments
            .iter()
            .flat_map(|s| s.frames.fields().iter().flat_map(|f| f.values().iter().copied()))
    }
}

/// Runs of consecutive values in a sorted list, as inclusive ranges.
pub fn runs(sorted: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &t in sorted {
        match out.last_mut() {
            Some((_, end)) if *end + 1 == t => *end = t,
            _ => out.push((t, t)),
        }
    }
    out
}

/// Segments of `targets` from a full archive and optional per-step oracles.
pub fn segments_for(
    archive: &FieldSequence,
    motion: Option<&[Vec<f32>]>,
    source: Option<&[Vec<f32>]>,
    targets: &[usize],
    lead_count: usize,
) -> Result<Vec<Segment>> {
    runs(targets)
        .into_iter()
        .map(|(a, b)| {
            let start = a.checked_sub(lead_count).ok_or_else(|| {
                Error::invalid(format!("target {a} has fewer than {lead_count} predecessors"))
            })?;
            Ok(Segment {
                start,
                frames: archive.slice(start, b + 1)?,
                motion: motion.map(|m| m[start..=b].to_vec()),
                source: source.map(|m| m[start..=b].to_vec()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Subset,
    pub validation: Subset,
    pub test: Subset,
}

impl Corpus {
    pub fn from_split(
        archive: &FieldSequence,
        motion: Option<&[Vec<f32>]>,
        source: Option<&[Vec<f32>]>,
        split: &DatasetSplit,
    ) -> Result<Self> {
        let span = split.lead_count + 1;
        let subset = |t: &[usize]| -> Result<Subset> {
            Subset::new(segments_for(archive, motion, source, t, split.lead_count)?, span)
        };
        Ok(Corpus {
            train: subset(&split.train)?,
            validation: subset(&split.validation)?,
            test: subset(&split.test)?,
        })
    }

    pub fn subsets(&self) -> [(&'static str, &Subset); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Writes `<dir>/<subset>/segNNN.rfs` plus `.motion.rfs` / `.source.rfs` oracles.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, subset) in self.subsets() {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            let (h, w) = subset.geometry();
            for (k, seg) in subset.segments.iter().enumerate() {
                let base = sub.join(format!("seg{k:03}"));
                write_stack(&seg.frames, base.with_extension("rfs"))?;
                let t0 = seg.frames.t0();
                if let Some(m) = &seg.motion {
                    channel_stack(m, 2, h, w, UNITS_MOTION, t0)?.write(base.with_extension("motion.rfs"))?;
                }
                if let Some(s) = &seg.source {
                    channel_stack(s, 1, h, w, UNITS_SOURCE, t0)?.write(base.with_extension("source.rfs"))?;
                }
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path, lead_count: usize) -> Result<Self> {
        let read_subset = |name: &str| -> Result<Subset> {
            let sub = dir.join(name);
            let mut paths: Vec<PathBuf> = fs::read_dir(&sub)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", sub.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seg") && n.ends_with(".rfs") && n.matches('.').count() == 1)
                })
                .collect();
            paths.sort();
            let mut segments = Vec::with_capacity(paths.len());
            for p in paths {
                let frames = read_stack(&p)?;
                let oracle = |ext: &str, units: &str, channels: usize| -> Result<Option<Vec<Vec<f32>>>> {
                    let q = p.with_extension(ext);
                    if !q.exists() {
                        return Ok(None);
                    }
                    let st = FieldStack::read(&q)?;
                    if st.header.units != units || st.header.channels != channels || st.header.frames != frames.len() {
                        return Err(Error::MalformedHeader(format!("{} does not match its frames", q.display())));
                    }
                    Ok(Some((0..st.header.frames).map(|k| st.frame(k).to_vec()).collect()))
                };
                let start = usize::try_from(frames.t0())
                    .map_err(|_| Error::MalformedHeader(format!("{}: negative t0_index", p.display())))?;
                segments.push(Segment {
                    start,
                    motion: oracle("motion.rfs", UNITS_MOTION, 2)?,
                    source: oracle("source.rfs", UNITS_SOURCE, 1)?,
                    frames,
                });
            }
            Subset::new(segments, lead_count + 1)
        };
        Ok(Corpus {
            train: read_subset("train")?,
            validation: read_subset("validation")?,
            test: read_subset("test")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_of_targets() {
        assert_eq!(runs(&[3, 4, 5, 9, 11, 12]), vec![(3, 5), (9, 9), (11, 12)]);
        assert!(runs(&[]).is_empty());
    }

    #[test]
    fn segments_reproduce_targets() {
        let frames = (0..40).map(|k| vec![k as f32; 64]).collect();
        let archive = FieldSequence::from_frames(8, 8, frames, 1.0, 0).unwrap();
        let targets = vec![11, 12, 13, 20, 30, 31];
        let segs = segments_for(&archive, None, None, &targets, 11).unwrap();
        let sub = Subset::new(segs, 12).unwrap();
        assert_eq!(sub.targets(), targets);
        let w = sub.windows(&[3]).unwrap();
        assert_eq!(w.at(0, 11, 0, 0), 20.0);
        assert_eq!(w.at(0, 0, 0, 0), 9.0);
    }
}
