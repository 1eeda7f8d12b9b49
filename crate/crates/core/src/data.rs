//! Synthetic identity data.
//!
//! Each identity is a fixed spatial pattern: a sum of random Gaussian blobs
//! in log-intensity space, all identities drawn from the same blob
//! statistics so nothing but blob placement separates them. Each sequence
//! films that pattern under a rigid trajectory (rotation about the sensor
//! center plus translation) with a per-sequence global log-gain ramp; the
//! ramp adds sequence-correlated events everywhere, which keeps raw pixel
//! statistics from trivially separating identities. Events come from the
//! contrast-threshold simulator and are windowed into frame sequences.

use crate::event::{build_sequence, simulate_events, EventFrameSequence, EventStream, IntensityFrame};
use crate::event::bilinear_resize;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub sequences_per_id: usize,
    pub sensor_hw: u16,
    pub contrast: f64,
    pub video_frames: usize,
    pub frame_interval_us: u64,
    pub delta_t_us: u64,
    pub frames: usize,
    pub target_hw: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_train_ids: 6,
            num_test_ids: 2,
            sequences_per_id: 16,
            sensor_hw: 48,
            contrast: 0.15,
            video_frames: 26,
            frame_interval_us: 8_000,
            delta_t_us: 50_000,
            frames: 4,
            target_hw: 32,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_train_ids < 2 {
            return Err("need at least 2 training identities".into());
        }
        if self.num_test_ids < 2 {
            return Err("need at least 2 test identities for impostor pairs".into());
        }
        if self.sequences_per_id < 2 {
            return Err("need at least 2 sequences per identity for genuine pairs".into());
        }
        let span = (self.video_frames as u64 - 1) * self.frame_interval_us;
        let needed = self.frames as u64 * self.delta_t_us;
        if span < needed {
            return Err(format!(
                "video spans {span}us but {needed}us of windows are requested"
            ));
        }
        Ok(())
    }

    pub fn label_of(identity: usize) -> String {
        format!("id{identity:03}")
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    cos_a: f64,
    sin_a: f64,
    inv_two_major2: f64,
    inv_two_minor2: f64,
    amp: f64,
}

/// One identity's appearance: a sum of oriented anisotropic Gaussian ridges
/// in log-intensity space. Identities share the blob statistics; what
/// separates them is the mix of orientations, elongations and scales, a
/// signature that survives spatial pooling (position alone would not).
struct Pattern {
    blobs: Vec<Blob>,
}

impl Pattern {
    fn new(rng: &mut Rng, size: f64) -> Pattern {
        let blobs = (0..7)
            .map(|_| {
                let major = rng.uniform(0.10, 0.22) * size;
                let minor = major * rng.uniform(0.20, 0.55);
                let angle = rng.uniform(0.0, std::f64::consts::PI);
                Blob {
                    cx: rng.uniform(0.25, 0.75) * size,
                    cy: rng.uniform(0.25, 0.75) * size,
                    cos_a: angle.cos(),
                    sin_a: angle.sin(),
                    inv_two_major2: 1.0 / (2.0 * major * major),
                    inv_two_minor2: 1.0 / (2.0 * minor * minor),
                    amp: rng.uniform(0.5, 1.0) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 },
                }
            })
            .collect();
        Pattern { blobs }
    }

    fn log_intensity(&self, x: f64, y: f64) -> f64 {
        let mut a = 0.0;
        for b in &self.blobs {
            let dx = x - b.cx;
            let dy = y - b.cy;
            let along = b.cos_a * dx + b.sin_a * dy;
            let ortho = -b.sin_a * dx + b.cos_a * dy;
            a += b.amp
                * (-(along * along * b.inv_two_major2 + ortho * ortho * b.inv_two_minor2)).exp();
        }
        a
    }
}

/// Rigid pose plus illumination state at one time point. The illumination
/// nuisance (global gain ramp and a sweeping linear light gradient) fires
/// events everywhere in a sequence-specific way: identity-free structure
/// that untrained features latch onto and training must learn to ignore.
struct PoseTrack {
    theta0: f64,
    theta1: f64,
    shift0: (f64, f64),
    shift1: (f64, f64),
    gain0: f64,
    gain1: f64,
    grad0: (f64, f64),
    grad1: (f64, f64),
}

impl PoseTrack {
    fn new(rng: &mut Rng, size: f64) -> PoseTrack {
        let max_shift = 0.10 * size;
        let g = 0.5;
        PoseTrack {
            theta0: rng.uniform(-0.30, 0.30),
            theta1: rng.uniform(-0.30, 0.30),
            shift0: (rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift)),
            shift1: (rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift)),
            gain0: 0.0,
            gain1: rng.uniform(-0.3, 0.3),
            grad0: (rng.uniform(-g, g), rng.uniform(-g, g)),
            grad1: (rng.uniform(-g, g), rng.uniform(-g, g)),
        }
    }

    /// Log intensity of the pattern under the pose at progress u in [0,1].
    fn sample(&self, pattern: &Pattern, x: f64, y: f64, u: f64, center: f64) -> f64 {
        let theta = self.theta0 + (self.theta1 - self.theta0) * u;
        let sx = self.shift0.0 + (self.shift1.0 - self.shift0.0) * u;
        let sy = self.shift0.1 + (self.shift1.1 - self.shift0.1) * u;
        let gain = self.gain0 + (self.gain1 - self.gain0) * u;
        let gx = self.grad0.0 + (self.grad1.0 - self.grad0.0) * u;
        let gy = self.grad0.1 + (self.grad1.1 - self.grad0.1) * u;
        // inverse rigid map: undo the shift, rotate back around the center
        let (px, py) = (x - sx - center, y - sy - center);
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let rx = cos_t * px + sin_t * py + center;
        let ry = -sin_t * px + cos_t * py + center;
        let span = 2.0 * center;
        let light = gx * (x - center) / span + gy * (y - center) / span;
        pattern.log_intensity(rx, ry) + gain + light
    }
}

fn render_video(pattern: &Pattern, track: &PoseTrack, cfg: &DataConfig) -> Vec<IntensityFrame> {
    let size = cfg.sensor_hw as usize;
    let center = (size as f64 - 1.0) / 2.0;
    (0..cfg.video_frames)
        .map(|f| {
            let u = f as f64 / (cfg.video_frames - 1) as f64;
            let mut pixels = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    pixels[y * size + x] =
                        track.sample(pattern, x as f64, y as f64, u, center).exp();
                }
            }
            IntensityFrame { t_us: f as u64 * cfg.frame_interval_us, pixels }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StreamSample {
    pub identity: usize,
    pub label: String,
    pub seq_index: usize,
    pub stream: EventStream,
}

#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub identity: usize,
    pub label: String,
    pub seq_index: usize,
    pub sequence: EventFrameSequence,
}

fn streams_for_ids(cfg: &DataConfig, seed: u64, ids: std::ops::Range<usize>) -> Vec<StreamSample> {
    let root = Rng::new(seed);
    let size = cfg.sensor_hw as f64;
    let mut out = Vec::new();
    for identity in ids {
        let pattern = Pattern::new(&mut root.fork(&format!("identity{identity}")), size);
        for seq_index in 0..cfg.sequences_per_id {
            let track = PoseTrack::new(&mut root.fork(&format!("traj{identity}-{seq_index}")), size);
            let video = render_video(&pattern, &track, cfg);
            let stream = simulate_events(cfg.sensor_hw, cfg.sensor_hw, &video, cfg.contrast)
                .expect("synthetic video is positive with increasing timestamps");
            out.push(StreamSample {
                identity,
                label: DataConfig::label_of(identity),
                seq_index,
                stream,
            });
        }
    }
    out
}

/// Event streams for the train and test splits; the identity pools are
/// disjoint by construction.
pub fn generate_streams(cfg: &DataConfig, seed: u64) -> (Vec<StreamSample>, Vec<StreamSample>) {
    let train = streams_for_ids(cfg, seed, 0..cfg.num_train_ids);
    let test = streams_for_ids(cfg, seed, cfg.num_train_ids..cfg.num_train_ids + cfg.num_test_ids);
    (train, test)
}

pub fn encode_stream(cfg: &DataConfig, stream: &EventStream) -> EventFrameSequence {
    build_sequence(stream, 0, cfg.frames, cfg.delta_t_us, cfg.target_hw)
        .expect("encode parameters validated")
}

/// Full in-memory dataset: simulate then encode both splits.
pub fn make_synthetic_dataset(cfg: &DataConfig, seed: u64) -> (Vec<EncodedSample>, Vec<EncodedSample>) {
    let (train, test) = generate_streams(cfg, seed);
    let enc = |samples: Vec<StreamSample>| {
        samples
            .into_iter()
            .map(|s| EncodedSample {
                identity: s.identity,
                label: s.label.clone(),
                seq_index: s.seq_index,
                sequence: encode_stream(cfg, &s.stream),
            })
            .collect()
    };
    (enc(train), enc(test))
}

/// Dense-frame pretraining samples: the same pattern/trajectory machinery
/// rendered as normalized intensity images instead of events, over an
/// identity pool disjoint from the event splits.
pub fn make_pretrain_dataset(cfg: &DataConfig, num_ids: usize, seed: u64) -> Vec<EncodedSample> {
    let root = Rng::new(seed);
    let size = cfg.sensor_hw as usize;
    let mut out = Vec::new();
    for k in 0..num_ids {
        let pattern = Pattern::new(&mut root.fork(&format!("pretrain-identity{k}")), size as f64);
        for seq_index in 0..cfg.sequences_per_id {
            let track =
                PoseTrack::new(&mut root.fork(&format!("pretrain-traj{k}-{seq_index}")), size as f64);
            let center = (size as f64 - 1.0) / 2.0;
            let mut frames = Vec::with_capacity(cfg.frames);
            for f in 0..cfg.frames {
                let u = f as f64 / (cfg.frames - 1).max(1) as f64;
                let mut plane = vec![0.0; size * size];
                for y in 0..size {
                    for x in 0..size {
                        plane[y * size + x] =
                            track.sample(&pattern, x as f64, y as f64, u, center).exp();
                    }
                }
                let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = (hi - lo).max(1e-12);
                let norm01: Vec<f64> = plane.iter().map(|v| (v - lo) / span).collect();
                let resized = bilinear_resize(&norm01, size, size, cfg.target_hw, cfg.target_hw);
                let mut frame = vec![0.0; cfg.target_hw * cfg.target_hw * 3];
                for (p, v) in resized.iter().enumerate() {
                    let mapped = 2.0 * v - 1.0;
                    frame[p * 3] = mapped;
                    frame[p * 3 + 1] = mapped;
                    frame[p * 3 + 2] = mapped;
                }
                frames.push(frame);
            }
            out.push(EncodedSample {
                identity: k,
                label: format!("pre{k:03}"),
                seq_index,
                sequence: EventFrameSequence {
                    hw: cfg.target_hw,
                    delta_t_us: cfg.delta_t_us,
                    frames,
                },
            });
        }
    }
    out
}

/// Mean Pearson correlation between the flattened frame stacks of two
/// sequences; the dataset sanity checks compare same- vs cross-identity.
pub fn sequence_correlation(a: &EventFrameSequence, b: &EventFrameSequence) -> f64 {
    let av: Vec<f64> = a.frames.iter().flatten().copied().collect();
    let bv: Vec<f64> = b.frames.iter().flatten().copied().collect();
    let n = av.len().min(bv.len()) as f64;
    let ma = av.iter().sum::<f64>() / n;
    let mb = bv.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in av.iter().zip(bv.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-30)
}
