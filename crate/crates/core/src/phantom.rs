//! Synthetic brain-like volumes with exact tissue labels and a controllable
//! binary class (cortical-shell thinning), standing in for clinical data in
//! every end-to-end test.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::volume::{Volume, LABEL_CSF, LABEL_GM, LABEL_WM};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

/// Generative parameters. Ellipsoid semi-axes are fractions of the volume
/// dims; nesting ventricle < WM core < GM shell < head is validated.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub head_axes: [f64; 3],
    pub gm_outer_axes: [f64; 3],
    /// Cortical shell width as a fraction of dims; the WM core surface sits
    /// this far inside the GM outer surface.
    pub gm_thickness: f64,
    pub ventricle_axes: [f64; 3],
    /// Class 1 shrinks the shell to gm_thickness * (1 - delta).
    pub atrophy_delta: f64,
    pub atrophy_class: u8,
    /// Intensity mean/std indexed by label: background, WM, GM, CSF.
    pub intensity_means: [f32; 4],
    pub intensity_stds: [f32; 4],
    /// Peak voxel displacement of the smooth sinusoidal deformation.
    pub deform_amplitude: f64,
    /// Relative per-sample jitter applied to axes and shell thickness.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            head_axes: [0.44, 0.42, 0.40],
            gm_outer_axes: [0.36, 0.34, 0.32],
            gm_thickness: 0.10,
            ventricle_axes: [0.10, 0.08, 0.08],
            atrophy_delta: 0.3,
            atrophy_class: 0,
            intensity_means: [0.02, 0.8, 0.5, 0.25],
            intensity_stds: [0.01, 0.03, 0.03, 0.03],
            deform_amplitude: 1.0,
            jitter: 0.03,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        for d in self.dims {
            if d == 0 || d % 16 != 0 {
                return Err(PhantomError::InvalidSpec(format!(
                    "dims {:?} must be positive multiples of 16",
                    self.dims
                )));
            }
        }
        let thickness = self.shell_thickness();
        for a in 0..3 {
            let wm = self.gm_outer_axes[a] - thickness;
            if !(self.ventricle_axes[a] > 0.0
                && self.ventricle_axes[a] < wm
                && wm < self.gm_outer_axes[a]
                && self.gm_outer_axes[a] < self.head_axes[a])
            {
                return Err(PhantomError::InvalidSpec(format!(
                    "axis {a}: need 0 < ventricle ({}) < WM core ({wm}) < GM shell ({}) < head ({})",
                    self.ventricle_axes[a], self.gm_outer_axes[a], self.head_axes[a]
                )));
            }
        }
        let m = self.intensity_means;
        if !(m[3] < m[2] && m[2] < m[1]) {
            return Err(PhantomError::InvalidSpec(format!(
                "intensity means must be ordered CSF < GM < WM, got CSF {} GM {} WM {}",
                m[3], m[2], m[1]
            )));
        }
        if !(0.0..=2.0).contains(&self.deform_amplitude) {
            return Err(PhantomError::InvalidSpec(format!(
                "deform_amplitude {} outside [0, 2] voxels",
                self.deform_amplitude
            )));
        }
        if self.atrophy_class > 1 {
            return Err(PhantomError::InvalidSpec(format!(
                "atrophy_class {} must be 0 or 1",
                self.atrophy_class
            )));
        }
        Ok(())
    }

    /// Shell thickness after the class-dependent atrophy factor.
    pub fn shell_thickness(&self) -> f64 {
        if self.atrophy_class == 1 {
            self.gm_thickness * (1.0 - self.atrophy_delta)
        } else {
            self.gm_thickness
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub intensity: Volume,
    pub labels: Volume,
    pub class_label: u8,
    pub seed: u64,
    pub id: String,
}

/// Per-sample realized geometry: jittered semi-axes in voxels plus center.
struct Geometry {
    center: [f64; 3],
    head: [f64; 3],
    gm: [f64; 3],
    wm: [f64; 3],
    ventricle: [f64; 3],
}

impl Geometry {
    fn label_at(&self, p: [f64; 3]) -> u8 {
        if inside(p, self.center, self.ventricle) {
            LABEL_CSF
        } else if inside(p, self.center, self.wm) {
            LABEL_WM
        } else if inside(p, self.center, self.gm) {
            LABEL_GM
        } else if inside(p, self.center, self.head) {
            // subarachnoid CSF rim between cortex and head boundary
            LABEL_CSF
        } else {
            crate::volume::LABEL_BACKGROUND
        }
    }
}

fn inside(p: [f64; 3], center: [f64; 3], axes: [f64; 3]) -> bool {
    let mut r = 0.0;
    for a in 0..3 {
        let t = (p[a] - center[a]) / axes[a];
        r += t * t;
    }
    r <= 1.0
}

/// Three low-frequency sinusoidal displacement fields summed per axis.
struct Deformation {
    amplitude: f64,
    freq: [[f64; 3]; 3],
    phase: [[f64; 3]; 3],
    dims: [f64; 3],
}

impl Deformation {
    fn draw(rng: &mut ChaCha8Rng, amplitude: f64, dims: [usize; 3]) -> Self {
        let mut freq = [[0.0; 3]; 3];
        let mut phase = [[0.0; 3]; 3];
        for k in 0..3 {
            for a in 0..3 {
                freq[k][a] = rng.random_range(0.5..1.5);
                phase[k][a] = rng.random_range(0.0..std::f64::consts::TAU);
            }
        }
        Deformation {
            amplitude,
            freq,
            phase,
            dims: [dims[0] as f64, dims[1] as f64, dims[2] as f64],
        }
    }

    fn displace(&self, p: [f64; 3]) -> [f64; 3] {
        if self.amplitude == 0.0 {
            return p;
        }
        let mut q = p;
        for a in 0..3 {
            let mut d = 0.0;
            for k in 0..3 {
                let u = self.freq[k][0] * p[0] / self.dims[0]
                    + self.freq[k][1] * p[1] / self.dims[1]
                    + self.freq[k][2] * p[2] / self.dims[2];
                d += (std::f64::consts::TAU * u + self.phase[k][a]).sin();
            }
            q[a] += self.amplitude * d / 3.0;
        }
        q
    }
}

fn realize_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Geometry {
    let d = [spec.dims[0] as f64, spec.dims[1] as f64, spec.dims[2] as f64];
    let mut center = [d[0] / 2.0, d[1] / 2.0, d[2] / 2.0];
    for c in center.iter_mut() {
        *c += rng.random_range(-1.0..1.0);
    }
    let j = spec.jitter;
    fn jit(rng: &mut ChaCha8Rng, j: f64, base: f64, dim: f64) -> f64 {
        base * dim * (1.0 + rng.random_range(-j..=j))
    }
    let axes = |base: [f64; 3], rng: &mut ChaCha8Rng| {
        [
            jit(rng, j, base[0], d[0]),
            jit(rng, j, base[1], d[1]),
            jit(rng, j, base[2], d[2]),
        ]
    };
    let head = axes(spec.head_axes, rng);
    let gm = axes(spec.gm_outer_axes, rng);
    let thickness = spec.shell_thickness() * (1.0 + rng.random_range(-j..=j));
    let wm = [
        gm[0] - thickness * d[0],
        gm[1] - thickness * d[1],
        gm[2] - thickness * d[2],
    ];
    let ventricle = axes(spec.ventricle_axes, rng);
    Geometry {
        center,
        head,
        gm,
        wm,
        ventricle,
    }
}

/// Deterministic per (spec, seed). Labels and intensities come from the same
/// membership evaluation at the same deformed coordinate, so they stay
/// consistent at every voxel.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomSample, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = realize_geometry(spec, &mut rng);
    let deform = Deformation::draw(&mut rng, spec.deform_amplitude, spec.dims);

    let [nx, ny, nz] = spec.dims;
    let numel = nx * ny * nz;
    let mut labels = vec![0u8; numel];
    let mut intensity = vec![0.0f32; numel];
    let noise = Normal::new(0.0f64, 1.0).unwrap();
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = deform.displace([x as f64, y as f64, z as f64]);
                let label = geom.label_at(p);
                labels[idx] = label;
                let n = noise.sample(&mut rng);
                let v = spec.intensity_means[label as usize] as f64
                    + spec.intensity_stds[label as usize] as f64 * n;
                intensity[idx] = v.clamp(0.0, 1.0) as f32;
                idx += 1;
            }
        }
    }

    let spacing = [1.0f32; 3];
    Ok(PhantomSample {
        intensity: Volume::new_intensity(spec.dims, spacing, intensity).expect("validated dims"),
        labels: Volume::new_labels(spec.dims, spacing, labels).expect("validated labels"),
        class_label: spec.atrophy_class,
        seed,
        id: format!("phantom_{seed:016x}"),
    })
}

/// Balanced dataset, class-alternating. Per-sample seeds derive as
/// `seed ^ index`, so prefixes are stable when n grows.
pub fn generate_dataset(
    n_per_class: usize,
    spec_base: &PhantomSpec,
    seed: u64,
) -> Result<Vec<PhantomSample>, PhantomError> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for class in 0..2u8 {
            let index = (2 * i + class as usize) as u64;
            let mut spec = spec_base.clone();
            spec.atrophy_class = class;
            let mut sample = generate_phantom(&spec, seed ^ index)?;
            sample.id = format!("phantom_{index:04}");
            out.push(sample);
        }
    }
    Ok(out)
}
