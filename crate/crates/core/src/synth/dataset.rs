//! Binary dataset files: `FPTD`, u32 version, u32 header length, header JSON,
//! then per scene a length-prefixed SceneSpec JSON, the raster as f32, and the
//! stored episodes. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    gen_scene, Episode, GenOptions, SceneRaster, SceneSpec, SynthError, Template, CHANNELS,
};
use crate::layout::Poke;

const MAGIC: &[u8; 4] = b"FPTD";
const VERSION: u32 = 1;

/// SplitMix64 finaliser over `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub templates: Vec<Template>,
    pub n_scenes: usize,
    pub episodes_per_scene: usize,
    pub n_tracks: usize,
    pub sigma_obs: f64,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub raster: SceneRaster,
    pub episodes: Vec<Episode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<SceneRecord>,
}

impl Dataset {
    /// Scene `i` uses template `templates[i % len]` and its own derived seed.
    pub fn generate(
        templates: &[Template],
        n_scenes: usize,
        episodes_per_scene: usize,
        n_tracks: usize,
        seed: u64,
        opts: &GenOptions,
    ) -> Result<Self, SynthError> {
        if templates.is_empty() && n_scenes > 0 {
            return Err(SynthError::Invalid("no templates".into()));
        }
        let scenes = (0..n_scenes)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                let (spec, raster) = gen_scene(&mut rng, templates[i % templates.len()], opts);
                let episodes = (0..episodes_per_scene)
                    .map(|_| spec.sample_episode(&mut rng, n_tracks))
                    .collect();
                SceneRecord {
                    spec,
                    raster,
                    episodes,
                }
            })
            .collect();
        let header = DatasetHeader {
            templates: templates.to_vec(),
            n_scenes,
            episodes_per_scene,
            n_tracks,
            sigma_obs: opts.sigma_obs,
            seed,
            image_size: opts.image_size,
            channels: CHANNELS,
        };
        Ok(Self { header, scenes })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, SynthError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.scenes {
            let spec = serde_json::to_vec(&s.spec)?;
            out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
            out.extend_from_slice(&spec);
            for v in &s.raster.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for e in &s.episodes {
                out.extend_from_slice(&(e.mode as u32).to_le_bytes());
                for t in &e.tracks {
                    for v in [t.pos[0], t.pos[1], t.flow[0], t.flow[1]] {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SynthError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| SynthError::Format("truncated".into()))?;
        if &magic != MAGIC {
            return Err(SynthError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(SynthError::Format(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let header: DatasetHeader = serde_json::from_slice(take(&mut r, len)?)?;
        let plane = header.channels * header.image_size * header.image_size;
        let mut scenes = Vec::with_capacity(header.n_scenes);
        for _ in 0..header.n_scenes {
            let len = read_u32(&mut r)? as usize;
            let spec: SceneSpec = serde_json::from_slice(take(&mut r, len)?)?;
            spec.validate()?;
            let data = take(&mut r, plane * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let raster = SceneRaster {
                channels: header.channels,
                size: header.image_size,
                data,
            };
            let mut episodes = Vec::with_capacity(header.episodes_per_scene);
            for _ in 0..header.episodes_per_scene {
                let mode = read_u32(&mut r)? as usize;
                if mode >= spec.modes.len() {
                    return Err(SynthError::Format(format!(
                        "episode mode {mode} out of range"
                    )));
                }
                let vals: Vec<f64> = take(&mut r, header.n_tracks * 16)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                let tracks = vals
                    .chunks_exact(4)
                    .map(|v| Poke {
                        pos: [v[0], v[1]],
                        flow: [v[2], v[3]],
                    })
                    .collect();
                episodes.push(Episode {
                    mode,
                    tracks,
                    static_flag: true,
                });
            }
            scenes.push(SceneRecord {
                spec,
                raster,
                episodes,
            });
        }
        if !r.is_empty() {
            return Err(SynthError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, scenes })
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, SynthError> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], SynthError> {
    if r.len() < n {
        return Err(SynthError::Format("truncated".into()));
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}
