//! Scene JSON and the binary weights file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::correspondence::{Correspondence, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keypoint2D, PoseRecord, ScenePoint3D};
use crate::network::{AngleConvention, ModelWeights, NetworkConfig};
use crate::synth::ScenePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseRecord,
    pub reference_pose: PoseRecord,
    /// `[u, v, r, g, b]`
    pub keypoints: Vec<[f64; 5]>,
    /// `[x, y, z, r, g, b]`
    pub points: Vec<[f64; 6]>,
    /// `[keypoint, point]`
    pub gt_matches: Vec<[usize; 2]>,
}

impl From<&ScenePair> for SceneFile {
    fn from(s: &ScenePair) -> Self {
        Self {
            intrinsics: s.intrinsics,
            pose: s.query_pose.into(),
            reference_pose: s.reference_pose.into(),
            keypoints: s
                .keypoints
                .iter()
                .map(|k| [k.u, k.v, k.color[0], k.color[1], k.color[2]])
                .collect(),
            points: s
                .points
                .iter()
                .map(|p| {
                    let [x, y, z] = p.position;
                    [x, y, z, p.color[0], p.color[1], p.color[2]]
                })
                .collect(),
            gt_matches: s.gt_matches.iter().map(|c| [c.keypoint, c.point]).collect(),
        }
    }
}

impl TryFrom<SceneFile> for ScenePair {
    type Error = Error;

    fn try_from(f: SceneFile) -> Result<Self> {
        let pair = ScenePair {
            intrinsics: f.intrinsics,
            query_pose: f.pose.into(),
            reference_pose: f.reference_pose.into(),
            keypoints: f
                .keypoints
                .iter()
                .map(|k| Keypoint2D {
                    u: k[0],
                    v: k[1],
                    color: [k[2], k[3], k[4]],
                })
                .collect(),
            points: f
                .points
                .iter()
                .map(|p| ScenePoint3D {
                    position: [p[0], p[1], p[2]],
                    color: [p[3], p[4], p[5]],
                })
                .collect(),
            gt_matches: CorrespondenceSet::new(
                f.gt_matches.iter().map(|&[i, j]| Correspondence::new(i, j, 1.0)).collect(),
            ),
        };
        pair.validate()?;
        Ok(pair)
    }
}

pub fn scene_to_json(s: &ScenePair) -> Result<String> {
    Ok(serde_json::to_string_pretty(&SceneFile::from(s))?)
}

pub fn scene_from_json(text: &str) -> Result<ScenePair> {
    serde_json::from_str::<SceneFile>(text)?.try_into()
}

pub fn save_scene(path: &Path, s: &ScenePair) -> Result<()> {
    let mut text = scene_to_json(s)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<ScenePair> {
    scene_from_json(&fs::read_to_string(path)?)
}

pub const WEIGHTS_MAGIC: &[u8; 4] = b"A2GW";
pub const WEIGHTS_VERSION: u16 = 1;

const FLAG_SHARE_ENCODER: u32 = 1;
const FLAG_SCORE_INPUT: u32 = 1 << 1;
const FLAG_CONSECUTIVE_ANGLES: u32 = 1 << 2;
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_config(out: &mut Vec<u8>, c: &NetworkConfig) -> Result<()> {
    for v in [c.d, c.k, c.g, c.n_blocks, c.encoder_units, c.classifier_units, c.sinkhorn_iters] {
        put_u32(out, v)?;
    }
    let mut flags = 0;
    if c.share_encoder {
        flags |= FLAG_SHARE_ENCODER;
    }
    if c.classifier_score_input {
        flags |= FLAG_SCORE_INPUT;
    }
    if c.angle_convention == AngleConvention::Consecutive {
        flags |= FLAG_CONSECUTIVE_ANGLES;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [c.leaky_slope, c.norm_eps, c.bn_momentum] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes to the `A2GW` layout; tensors are narrowed to f32.
pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    encode_config(&mut out, &w.config)?;
    put_u32(&mut out, w.params.len() + w.buffers.len())?;
    for (name, t) in w.params.iter().chain(&w.buffers) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format(format!("{name}: rank too large")))?;
        out.push(rank);
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ModelWeights> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(c.array()?);
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let mut ints = [0usize; 7];
    for v in ints.iter_mut() {
        *v = c.u32()?;
    }
    let flags = u32::from_le_bytes(c.array()?);
    let config = NetworkConfig {
        d: ints[0],
        k: ints[1],
        g: ints[2],
        n_blocks: ints[3],
        encoder_units: ints[4],
        classifier_units: ints[5],
        sinkhorn_iters: ints[6],
        share_encoder: flags & FLAG_SHARE_ENCODER != 0,
        classifier_score_input: flags & FLAG_SCORE_INPUT != 0,
        angle_convention: if flags & FLAG_CONSECUTIVE_ANGLES != 0 {
            AngleConvention::Consecutive
        } else {
            AngleConvention::NearestNeighbor
        },
        leaky_slope: c.f64()?,
        norm_eps: c.f64()?,
        bn_momentum: c.f64()?,
    };
    let count = c.u32()?;
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f32::from_le_bytes(c.array()?) as f64))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data)?;
        let dest = if BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s)) {
            &mut buffers
        } else {
            &mut params
        };
        if dest.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate record `{name}`")));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let w = ModelWeights {
        config,
        params,
        buffers,
    };
    w.validate()?;
    Ok(w)
}

pub fn save_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    let bytes = encode_weights(w)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_weights(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SynthConfig};

    fn small() -> ModelWeights {
        let cfg = NetworkConfig {
            d: 8,
            share_encoder: true,
            angle_convention: AngleConvention::Consecutive,
            ..NetworkConfig::default()
        };
        let mut w = ModelWeights::init(&cfg, 3).unwrap();
        w.init_running_stats();
        w
    }

    #[test]
    fn weights_round_trip_within_f32() {
        let w = small();
        let back = decode_weights(&encode_weights(&w).unwrap()).unwrap();
        assert_eq!(back.config, w.config);
        assert_eq!(back.params.keys().collect::<Vec<_>>(), w.params.keys().collect::<Vec<_>>());
        assert_eq!(back.buffers.len(), w.buffers.len());
        for (name, t) in w.params.iter().chain(&w.buffers) {
            let b = back.params.get(name).or_else(|| back.buffers.get(name)).unwrap();
            assert_eq!(b.shape, t.shape);
            for (x, y) in t.data.iter().zip(&b.data) {
                assert_eq!(*y, *x as f32 as f64, "{name}");
            }
        }
        // A second trip is exact.
        let again = decode_weights(&encode_weights(&back).unwrap()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_weights(&small()).unwrap();
        assert_eq!(&bytes[..4], b"A2GW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), WEIGHTS_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 8);
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = encode_weights(&small()).unwrap();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_weights(&v2),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::Format(_))));
        bytes.pop();
        assert!(matches!(decode_weights(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn scene_round_trip_is_exact() {
        let s = generate_scene(&SynthConfig {
            n_points: 20,
            seed: 5,
            pixel_noise_sigma: 0.7,
            ..SynthConfig::default()
        })
        .unwrap();
        let text = scene_to_json(&s).unwrap();
        let back = scene_from_json(&text).unwrap();
        assert_eq!(back.keypoints, s.keypoints);
        assert_eq!(back.points, s.points);
        assert_eq!(back.query_pose, s.query_pose);
        assert_eq!(back.reference_pose, s.reference_pose);
        assert_eq!(back.gt_matches.len(), s.gt_matches.len());
        assert_eq!(scene_to_json(&back).unwrap(), text);
    }

    #[test]
    fn scene_rejects_unknown_fields() {
        let s = generate_scene(&SynthConfig { n_points: 12, ..SynthConfig::default() }).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&s).unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(scene_from_json(&v.to_string()).is_err());
    }
}
