//! Event streams: parsing, simulation, windowed accumulation and rendering
//! into the dense 3-channel frame sequences the network consumes.
//!
//! File format (UTF-8, LF): first line `width,height`, second line the
//! header `t_us,x,y,p`, then one row per event with p in {-1,1}, sorted by
//! timestamp.

use std::fmt;

/// One sensor event: pixel location, microsecond timestamp, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

/// Ordered event stream with its sensor geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<EventRecord>,
}

/// Per-polarity count grids over one half-open window [t_s, t_e).
#[derive(Clone, Debug, PartialEq)]
pub struct PolarityMaps {
    pub width: u16,
    pub height: u16,
    pub gamma_pos: Vec<u32>,
    pub gamma_neg: Vec<u32>,
    pub t_start: u64,
    pub t_end: u64,
}

/// F dense H×W×3 frames in [-1,1].
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrameSequence {
    pub hw: usize,
    pub delta_t_us: u64,
    /// Row-major H×W×3 per frame.
    pub frames: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventError {
    Parse { line: usize, detail: String },
    Ordering { line: usize, prev: u64, got: u64 },
    Geometry { line: usize, x: u16, y: u16, width: u16, height: u16 },
    Invalid(String),
}

impl fmt::Display for EventError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventError::Parse { line, detail } => write!(f, "line {line}: {detail}"),
            EventError::Ordering { line, prev, got } => {
                write!(f, "line {line}: timestamp {got} regresses below {prev}")
            }
            EventError::Geometry { line, x, y, width, height } => {
                write!(f, "line {line}: coordinate ({x},{y}) outside {width}x{height} sensor")
            }
            EventError::Invalid(d) => write!(f, "{d}"),
        }
    }
}

impl std::error::Error for EventError {}

pub type Result<T> = std::result::Result<T, EventError>;

// ---------------------------------------------------------------------------
// CSV parse / write
// ---------------------------------------------------------------------------

pub fn parse_event_file(text: &str) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    let (_, geom) = lines
        .next()
        .ok_or_else(|| EventError::Parse { line: 1, detail: "missing geometry line".into() })?;
    let mut it = geom.split(',');
    let width: u16 = it
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| EventError::Parse { line: 1, detail: format!("bad geometry: {geom:?}") })?;
    let height: u16 = it
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| EventError::Parse { line: 1, detail: format!("bad geometry: {geom:?}") })?;
    if it.next().is_some() || width == 0 || height == 0 {
        return Err(EventError::Parse { line: 1, detail: format!("bad geometry: {geom:?}") });
    }
    let (_, header) = lines
        .next()
        .ok_or_else(|| EventError::Parse { line: 2, detail: "missing header line".into() })?;
    if header.trim() != "t_us,x,y,p" {
        return Err(EventError::Parse { line: 2, detail: format!("expected header t_us,x,y,p, got {header:?}") });
    }

    let mut events = Vec::new();
    let mut prev_t: Option<u64> = None;
    for (idx, row) in lines {
        let line = idx + 1;
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(EventError::Parse { line, detail: format!("expected 4 fields, got {}", fields.len()) });
        }
        let t: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| EventError::Parse { line, detail: format!("bad timestamp {:?}", fields[0]) })?;
        let x: u16 = fields[1]
            .trim()
            .parse()
            .map_err(|_| EventError::Parse { line, detail: format!("bad x {:?}", fields[1]) })?;
        let y: u16 = fields[2]
            .trim()
            .parse()
            .map_err(|_| EventError::Parse { line, detail: format!("bad y {:?}", fields[2]) })?;
        let p: i8 = fields[3]
            .trim()
            .parse()
            .map_err(|_| EventError::Parse { line, detail: format!("bad polarity {:?}", fields[3]) })?;
        if p != 1 && p != -1 {
            return Err(EventError::Parse { line, detail: format!("polarity must be -1 or 1, got {p}") });
        }
        if x >= width || y >= height {
            return Err(EventError::Geometry { line, x, y, width, height });
        }
        if let Some(prev) = prev_t {
            if t < prev {
                return Err(EventError::Ordering { line, prev, got: t });
            }
        }
        prev_t = Some(t);
        events.push(EventRecord { x, y, t, p });
    }
    Ok(EventStream { width, height, events })
}

pub fn write_event_file(stream: &EventStream) -> String {
    let mut out = String::with_capacity(32 + stream.events.len() * 16);
    out.push_str(&format!("{},{}\n", stream.width, stream.height));
    out.push_str("t_us,x,y,p\n");
    for e in &stream.events {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    out
}

// ---------------------------------------------------------------------------
// simulation from an intensity video
// ---------------------------------------------------------------------------

/// One dense intensity frame with its timestamp.
#[derive(Clone, Debug)]
pub struct IntensityFrame {
    pub t_us: u64,
    /// Row-major H×W, strictly positive.
    pub pixels: Vec<f64>,
}

/// Emit events wherever the per-pixel log intensity drifts from its running
/// reference by at least the contrast threshold.
///
/// Per pixel: the reference starts at the first frame's log intensity; for
/// every later frame, floor(|delta|/C) events of sign(delta) are emitted,
/// each advancing the reference by ±C, with timestamps placed where the
/// linearly-interpolated log trajectory crosses each reference level. The
/// output is globally sorted by (t, y, x, p) for a deterministic order.
pub fn simulate_events(width: u16, height: u16, video: &[IntensityFrame], contrast: f64) -> Result<EventStream> {
    if contrast <= 0.0 {
        return Err(EventError::Invalid(format!("contrast threshold must be > 0, got {contrast}")));
    }
    if video.is_empty() {
        return Ok(EventStream { width, height, events: Vec::new() });
    }
    let npix = width as usize * height as usize;
    for (i, f) in video.iter().enumerate() {
        if f.pixels.len() != npix {
            return Err(EventError::Invalid(format!(
                "frame {i}: {} pixels, expected {npix}",
                f.pixels.len()
            )));
        }
        if f.pixels.iter().any(|&v| v <= 0.0) {
            return Err(EventError::Invalid(format!("frame {i}: non-positive intensity")));
        }
        if i > 0 && f.t_us <= video[i - 1].t_us {
            return Err(EventError::Invalid(format!("frame {i}: timestamps must strictly increase")));
        }
    }

    let mut reference: Vec<f64> = video[0].pixels.iter().map(|v| v.ln()).collect();
    let mut prev_log: Vec<f64> = reference.clone();
    let mut events: Vec<EventRecord> = Vec::new();

    for pair in video.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let span = (cur.t_us - prev.t_us) as f64;
        for py in 0..height as usize {
            for px in 0..width as usize {
                let idx = py * width as usize + px;
                let cur_log = cur.pixels[idx].ln();
                let delta = cur_log - reference[idx];
                let count = (delta.abs() / contrast).floor() as u64;
                if count > 0 {
                    let sign = delta.signum();
                    let polarity: i8 = if sign > 0.0 { 1 } else { -1 };
                    let denom = cur_log - prev_log[idx];
                    for j in 1..=count {
                        let level = reference[idx] + sign * contrast * j as f64;
                        // the crossing always lies between the previous and
                        // current log values, see module tests
                        let frac = if denom.abs() < 1e-300 {
                            1.0
                        } else {
                            ((level - prev_log[idx]) / denom).clamp(0.0, 1.0)
                        };
                        let t = prev.t_us + (frac * span) as u64;
                        events.push(EventRecord { x: px as u16, y: py as u16, t, p: polarity });
                    }
                    reference[idx] += sign * contrast * count as f64;
                }
                prev_log[idx] = cur_log;
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    Ok(EventStream { width, height, events })
}

// ---------------------------------------------------------------------------
// accumulation and rendering
// ---------------------------------------------------------------------------

/// Count events per polarity over the half-open window [t_s, t_s + delta_t).
pub fn accumulate_window(stream: &EventStream, t_start: u64, delta_t: u64) -> Result<PolarityMaps> {
    if delta_t == 0 {
        return Err(EventError::Invalid("delta_t must be > 0".into()));
    }
    let t_end = t_start.saturating_add(delta_t);
    let npix = stream.width as usize * stream.height as usize;
    let mut gamma_pos = vec![0u32; npix];
    let mut gamma_neg = vec![0u32; npix];
    for e in &stream.events {
        if e.t >= t_start && e.t < t_end {
            let idx = e.y as usize * stream.width as usize + e.x as usize;
            if e.p > 0 {
                gamma_pos[idx] += 1;
            } else {
                gamma_neg[idx] += 1;
            }
        }
    }
    Ok(PolarityMaps {
        width: stream.width,
        height: stream.height,
        gamma_pos,
        gamma_neg,
        t_start,
        t_end,
    })
}

/// Render polarity counts into one H×W×3 frame in [-1,1].
///
/// Positive counts drive channel 0, negative counts channel 2, channel 1 is
/// empty. Counts are divided by the frame's maximum count over both
/// polarities, then mapped affinely from [0,1] to [-1,1]; a window with no
/// events renders as uniform -1.
pub fn render_frame(maps: &PolarityMaps) -> Vec<f64> {
    let npix = maps.width as usize * maps.height as usize;
    let max_count = maps
        .gamma_pos
        .iter()
        .chain(maps.gamma_neg.iter())
        .copied()
        .max()
        .unwrap_or(0);
    let mut frame = vec![-1.0; npix * 3];
    if max_count == 0 {
        return frame;
    }
    let inv = 1.0 / max_count as f64;
    for i in 0..npix {
        frame[i * 3] = 2.0 * (maps.gamma_pos[i] as f64 * inv) - 1.0;
        frame[i * 3 + 2] = 2.0 * (maps.gamma_neg[i] as f64 * inv) - 1.0;
    }
    frame
}

/// Bilinear resize of one channel plane with half-pixel-center sampling and
/// clamp-to-edge; constant inputs stay constant.
pub fn bilinear_resize(src: &[f64], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    let mut dst = vec![0.0; dst_h * dst_w];
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for dy in 0..dst_h {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for dx in 0..dst_w {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bot = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            dst[dy * dst_w + dx] = top * (1.0 - wy) + bot * wy;
        }
    }
    dst
}

/// Accumulate F consecutive windows from `t_start`, resize each normalized
/// count plane to `target_hw`, and map into [-1,1].
///
/// Normalization happens on the raw counts before the resize; bilinear
/// interpolation is convex, so values stay inside [-1,1].
pub fn build_sequence(
    stream: &EventStream,
    t_start: u64,
    num_frames: usize,
    delta_t: u64,
    target_hw: usize,
) -> Result<EventFrameSequence> {
    if num_frames == 0 {
        return Err(EventError::Invalid("need at least one frame".into()));
    }
    if target_hw == 0 {
        return Err(EventError::Invalid("target size must be >= 1".into()));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut frames = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let maps = accumulate_window(stream, t_start + f as u64 * delta_t, delta_t)?;
        let max_count = maps
            .gamma_pos
            .iter()
            .chain(maps.gamma_neg.iter())
            .copied()
            .max()
            .unwrap_or(0);
        let mut frame = vec![-1.0; target_hw * target_hw * 3];
        if max_count > 0 {
            let inv = 1.0 / max_count as f64;
            let pos01: Vec<f64> = maps.gamma_pos.iter().map(|&c| c as f64 * inv).collect();
            let neg01: Vec<f64> = maps.gamma_neg.iter().map(|&c| c as f64 * inv).collect();
            let pos = bilinear_resize(&pos01, h, w, target_hw, target_hw);
            let neg = bilinear_resize(&neg01, h, w, target_hw, target_hw);
            for i in 0..target_hw * target_hw {
                frame[i * 3] = 2.0 * pos[i] - 1.0;
                frame[i * 3 + 2] = 2.0 * neg[i] - 1.0;
            }
        }
        frames.push(frame);
    }
    Ok(EventFrameSequence { hw: target_hw, delta_t_us: delta_t, frames })
}

/// Per-event reference count used to cross-check `accumulate_window`:
/// walks the stream once and tallies (pixel, polarity) hits the dumb way.
pub fn accumulate_window_oracle(stream: &EventStream, t_start: u64, delta_t: u64) -> (Vec<u32>, Vec<u32>) {
    let npix = stream.width as usize * stream.height as usize;
    let mut pos = vec![0u32; npix];
    let mut neg = vec![0u32; npix];
    for e in &stream.events {
        let in_window = (e.t as u128) >= (t_start as u128)
            && (e.t as u128) < (t_start as u128 + delta_t as u128);
        if in_window {
            let idx = e.y as usize * stream.width as usize + e.x as usize;
            match e.p {
                1 => pos[idx] += 1,
                -1 => neg[idx] += 1,
                _ => unreachable!("polarity invariant"),
            }
        }
    }
    (pos, neg)
}
