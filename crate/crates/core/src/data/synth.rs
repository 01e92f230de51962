//! Layered-primitive scenes with depth-dependent shading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on how many primitives of each kind a scene may contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrimitiveMix {
    pub planes: usize,
    pub boxes: usize,
    pub spheres: usize,
}

impl Default for PrimitiveMix {
    fn default() -> Self {
        PrimitiveMix {
            planes: 1,
            boxes: 3,
            spheres: 3,
        }
    }
}

impl PrimitiveMix {
    pub fn empty() -> Self {
        PrimitiveMix {
            planes: 0,
            boxes: 0,
            spheres: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub max_depth: f64,
    pub mix: PrimitiveMix,
    pub seed: u64,
    /// Prefix of generated sample ids.
    pub id_prefix: String,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            count: 16,
            height: 32,
            width: 32,
            max_depth: 10.0,
            mix: PrimitiveMix::default(),
            seed: 0,
            id_prefix: "s".into(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return Err(Error::invalid("max_depth must be positive"));
        }
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene count and size must be positive"));
        }
        Ok(())
    }

    /// Distance of the fronto-parallel background plane.
    pub fn background_depth(&self) -> f64 {
        0.95 * self.max_depth
    }

    fn near_limit(&self) -> f64 {
        0.15 * self.max_depth
    }
}

struct Layer {
    depth: Vec<f64>,
    albedo: [f64; 3],
    /// Stripe texture frequency; zero for untextured surfaces.
    stripes: f64,
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0)]
}

fn plane_layer(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layer {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let far = rng.gen_range(0.5..0.9) * cfg.max_depth;
    let near = rng.gen_range(0.2..0.45) * cfg.max_depth;
    // floor-like ramp from `near` at the bottom edge to `far` at a horizon row
    let horizon = rng.gen_range(0.3..0.6) * h;
    let tilt = rng.gen_range(-0.3..0.3);
    let mut depth = vec![f64::INFINITY; cfg.height * cfg.width];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let row = y as f64 + tilt * (x as f64 - w / 2.0);
            if row < horizon {
                continue;
            }
            let t = (row - horizon) / (h - horizon).max(1.0);
            depth[y * cfg.width + x] = far + (near - far) * t.min(1.0);
        }
    }
    Layer {
        depth,
        albedo: random_albedo(rng),
        stripes: rng.gen_range(0.3..1.5),
    }
}

fn box_layer(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layer {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let bw = rng.gen_range(0.15..0.45) * w;
    let bh = rng.gen_range(0.15..0.45) * h;
    let x0 = rng.gen_range(-0.1 * w..w - 0.5 * bw);
    let y0 = rng.gen_range(-0.1 * h..h - 0.5 * bh);
    let d0 = rng.gen_range(0.25..0.85) * cfg.max_depth;
    let gx = rng.gen_range(-0.02..0.02) * cfg.max_depth;
    let mut depth = vec![f64::INFINITY; cfg.height * cfg.width];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if fx >= x0 && fx < x0 + bw && fy >= y0 && fy < y0 + bh {
                depth[y * cfg.width + x] = d0 + gx * (fx - x0 - bw / 2.0);
            }
        }
    }
    Layer {
        depth,
        albedo: random_albedo(rng),
        stripes: 0.0,
    }
}

fn sphere_layer(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layer {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let r = rng.gen_range(0.08..0.25) * w.min(h);
    let cx = rng.gen_range(0.0..w);
    let cy = rng.gen_range(0.0..h);
    let center = rng.gen_range(0.3..0.85) * cfg.max_depth;
    // bulge toward the camera, proportional to the projected radius
    let bulge = (r / w.min(h)) * 0.6 * cfg.max_depth;
    let mut depth = vec![f64::INFINITY; cfg.height * cfg.width];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let dx = (x as f64 + 0.5 - cx) / r;
            let dy = (y as f64 + 0.5 - cy) / r;
            let rho = dx * dx + dy * dy;
            if rho < 1.0 {
                depth[y * cfg.width + x] = center - bulge * (1.0 - rho).sqrt();
            }
        }
    }
    Layer {
        depth,
        albedo: random_albedo(rng),
        stripes: 0.0,
    }
}

fn render(cfg: &SceneConfig, layers: &[Layer], id: String) -> Result<DepthSample> {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let bg = cfg.background_depth();
    let mut depth = vec![bg; hw];
    let mut owner = vec![usize::MAX; hw];
    for (li, layer) in layers.iter().enumerate() {
        for p in 0..hw {
            if layer.depth[p] < depth[p] {
                depth[p] = layer.depth[p];
                owner[p] = li;
            }
        }
    }
    let lo = cfg.near_limit();
    for d in depth.iter_mut() {
        *d = d.clamp(lo, cfg.max_depth);
    }

    let light = {
        let l = [-0.4f64, -0.5, 1.0];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    // pixel pitch at unit depth, used to turn depth gradients into normals
    let pitch = 1.0 / w.max(h) as f64;
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        depth[yc * w + xc]
    };
    let mut rgb = vec![0f32; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let d = depth[p];
            let (xi, yi) = (x as isize, y as isize);
            let same = |q: isize, r: isize| {
                let qc = q.clamp(0, w as isize - 1) as usize;
                let rc = r.clamp(0, h as isize - 1) as usize;
                owner[rc * w + qc] == owner[p]
            };
            let dzdx = if same(xi - 1, yi) && same(xi + 1, yi) {
                (at(xi + 1, yi) - at(xi - 1, yi)) / 2.0
            } else {
                0.0
            };
            let dzdy = if same(xi, yi - 1) && same(xi, yi + 1) {
                (at(xi, yi + 1) - at(xi, yi - 1)) / 2.0
            } else {
                0.0
            };
            let scale = d * pitch;
            let n = [-dzdx / scale, -dzdy / scale, 1.0];
            let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let lambert = ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nn).max(0.0);
            let shade = 0.35 + 0.65 * lambert;
            let atten = (-1.6 * d / cfg.max_depth).exp();
            let (albedo, stripes) = match layers.get(owner[p]) {
                Some(l) => (l.albedo, l.stripes),
                None => ([0.8, 0.8, 0.85], 0.0),
            };
            let texture = if stripes > 0.0 {
                0.85 + 0.15 * (stripes * (x + y) as f64).sin()
            } else {
                1.0
            };
            for c in 0..3 {
                let v = albedo[c] * shade * atten * texture * 1.25;
                rgb[c * hw + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let depth = depth.into_iter().map(|d| d as f32).collect();
    DepthSample::new(id, Tensor::new([3, h, w], rgb)?, Tensor::new([1, h, w], depth)?)
}

/// Deterministic scenes: a background plane at `background_depth` with up
/// to `mix` planes, boxes and spheres in front of it. Depth lies in
/// `[0.15 max_depth, 0.95 max_depth]`.
pub fn generate_synthetic_dataset(cfg: &SceneConfig) -> Result<Vec<DepthSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let digits = (cfg.count.max(2) - 1).to_string().len();
    (0..cfg.count)
        .map(|i| {
            let mut layers = Vec::new();
            for _ in 0..rng.gen_range(0..=cfg.mix.planes) {
                layers.push(plane_layer(cfg, &mut rng));
            }
            let min_obj = usize::from(cfg.mix.boxes + cfg.mix.spheres > 0);
            let n_obj = rng.gen_range(min_obj..=cfg.mix.boxes + cfg.mix.spheres);
            for _ in 0..n_obj {
                let pick_box = rng.gen_range(0..cfg.mix.boxes + cfg.mix.spheres) < cfg.mix.boxes;
                layers.push(if pick_box {
                    box_layer(cfg, &mut rng)
                } else {
                    sphere_layer(cfg, &mut rng)
                });
            }
            render(cfg, &layers, format!("{}{:0digits$}", cfg.id_prefix, i))
        })
        .collect()
}
