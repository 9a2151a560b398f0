//! Seeded synthetic sensor networks with daily/weekly periodicity.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use stb_tensor::Tensor;

use super::series::SeriesTensor;
use crate::error::{Error, Result};
use crate::graph::{Edge, SparseGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthLayout {
    /// Nodes scattered uniformly over the unit square.
    Uniform,
    /// Nodes grouped in tight clusters that share a phase and level.
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub layout: SynthLayout,
    pub clusters: usize,
    /// Spread of nodes around a cluster centre.
    pub cluster_spread: f64,
    /// Connection radius of the geometric graph.
    pub radius: f64,
    /// Gaussian-kernel bandwidth for distance weights `exp(−d²/σ²)`.
    pub kernel_sigma: f64,
    pub base_level: f64,
    pub level_spread: f64,
    pub daily_amplitude: f64,
    /// Relative amplitude of the weekly envelope.
    pub weekly_modulation: f64,
    /// Phase change across the unit square (radians) in the uniform layout.
    pub phase_gradient: f64,
    pub phase_jitter: f64,
    pub ar_coef: f64,
    /// Fraction of each node's noise replaced by its neighbours' every tick.
    pub diffusion: f64,
    pub noise_std: f64,
    /// Unix time of the first sample.
    pub start_timestamp: i64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            layout: SynthLayout::Uniform,
            clusters: 4,
            cluster_spread: 0.04,
            radius: 0.3,
            kernel_sigma: 0.2,
            base_level: 50.0,
            level_spread: 15.0,
            daily_amplitude: 20.0,
            weekly_modulation: 0.3,
            phase_gradient: 2.0,
            phase_jitter: 0.3,
            ar_coef: 0.95,
            diffusion: 0.5,
            noise_std: 2.0,
            // Monday 2024-01-01 00:00 UTC.
            start_timestamp: 1_704_067_200,
        }
    }
}

impl SynthProfile {
    pub fn clustered() -> Self {
        SynthProfile {
            layout: SynthLayout::Clustered,
            radius: 0.2,
            ..SynthProfile::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let checks = [
            ("synth.radius", self.radius > 0.0),
            ("synth.kernel_sigma", self.kernel_sigma > 0.0),
            ("synth.ar_coef", (0.0..1.0).contains(&self.ar_coef)),
            ("synth.diffusion", (0.0..=1.0).contains(&self.diffusion)),
            ("synth.noise_std", self.noise_std >= 0.0),
            ("synth.clusters", self.layout == SynthLayout::Uniform || self.clusters >= 1),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Gaussian-kernel weighted geometric graph.
    pub distance_graph: SparseGraph,
    /// Same edges with unit weights.
    pub binary_graph: SparseGraph,
    pub series: SeriesTensor,
    /// Deterministic part of the signal, `[N, T, 1]`.
    pub base: Tensor,
    pub positions: Vec<(f64, f64)>,
    /// Cluster of each node (all zero for the uniform layout).
    pub cluster: Vec<usize>,
}

/// Builds a random geometric graph and a series per node:
/// level + daily sinusoid under a weekly envelope + AR(1) noise diffused one
/// step per tick along the distance graph.
pub fn synth_generate(
    n_nodes: usize,
    days: usize,
    step_minutes: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<SynthDataset> {
    if n_nodes < 2 {
        return Err(Error::config("synth.nodes", "need at least 2 nodes"));
    }
    if days == 0 || step_minutes == 0 || 1440 % step_minutes != 0 {
        return Err(Error::config(
            "synth.step_minutes",
            "days must be positive and the step must divide a day",
        ));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_day = 1440 / step_minutes;
    let t_len = days * per_day;

    let (positions, cluster) = place_nodes(n_nodes, profile, &mut rng);
    let mut edges = Vec::new();
    for u in 0..n_nodes {
        for v in u + 1..n_nodes {
            let (dx, dy) = (positions[u].0 - positions[v].0, positions[u].1 - positions[v].1);
            let d2 = dx * dx + dy * dy;
            if d2 < profile.radius * profile.radius {
                let w = (-d2 / (profile.kernel_sigma * profile.kernel_sigma)).exp();
                edges.push(Edge { u, v, w });
            }
        }
    }
    let distance_graph = SparseGraph::new(n_nodes, edges, false)?;
    let binary_graph = distance_graph.binarized();

    // Per-node level, amplitude and phase.
    let n_clusters = cluster.iter().max().map_or(1, |c| c + 1);
    let cluster_phase: Vec<f64> = (0..n_clusters).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let cluster_level: Vec<f64> = (0..n_clusters).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut level = Vec::with_capacity(n_nodes);
    let mut amp = Vec::with_capacity(n_nodes);
    let mut phase = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * profile.phase_jitter;
        let (lvl, ph) = match profile.layout {
            SynthLayout::Uniform => (
                rng.random_range(-1.0..1.0),
                profile.phase_gradient * (positions[i].0 + positions[i].1) / 2.0,
            ),
            SynthLayout::Clustered => (cluster_level[cluster[i]], cluster_phase[cluster[i]]),
        };
        level.push(profile.base_level + profile.level_spread * lvl);
        amp.push(profile.daily_amplitude * rng.random_range(0.7..1.3));
        phase.push(ph + jitter);
    }

    let rows = distance_graph.transition_rows();
    let day = per_day as f64;
    let mut base = vec![0.0; n_nodes * t_len];
    let mut values = vec![0.0; n_nodes * t_len];
    let sd_inno = profile.noise_std * (1.0 - profile.ar_coef * profile.ar_coef).sqrt();
    let mut noise = vec![0.0; n_nodes];
    for i in 0..n_nodes {
        noise[i] = profile.noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    let mut next = vec![0.0; n_nodes];
    for t in 0..t_len {
        let tf = t as f64;
        let envelope = 1.0 + profile.weekly_modulation * (2.0 * PI * tf / (7.0 * day)).sin();
        for i in 0..n_nodes {
            let daily = (2.0 * PI * tf / day + phase[i]).sin() + 0.35 * (4.0 * PI * tf / day + 2.0 * phase[i]).sin();
            let b = level[i] + amp[i] * envelope * daily;
            base[i * t_len + t] = b;
            values[i * t_len + t] = b + noise[i];
        }
        for i in 0..n_nodes {
            let neighbour: f64 = if rows[i].is_empty() {
                noise[i]
            } else {
                rows[i].iter().map(|&(j, w)| w * noise[j]).sum()
            };
            let mixed = (1.0 - profile.diffusion) * noise[i] + profile.diffusion * neighbour;
            next[i] = profile.ar_coef * mixed + sd_inno * rng.sample::<f64, _>(StandardNormal);
        }
        std::mem::swap(&mut noise, &mut next);
    }
    let series = SeriesTensor::new(Tensor::new(vec![n_nodes, t_len, 1], values)?)?
        .with_time(profile.start_timestamp, (step_minutes * 60) as i64)?
        .with_feature_names(vec!["flow".into()])?;
    Ok(SynthDataset {
        distance_graph,
        binary_graph,
        series,
        base: Tensor::new(vec![n_nodes, t_len, 1], base)?,
        positions,
        cluster,
    })
}

fn place_nodes<R: Rng>(n: usize, profile: &SynthProfile, rng: &mut R) -> (Vec<(f64, f64)>, Vec<usize>) {
    match profile.layout {
        SynthLayout::Uniform => {
            let pos = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            (pos, vec![0; n])
        }
        SynthLayout::Clustered => {
            let k = profile.clusters.min(n);
            // Centres on a jittered circle keep clusters apart.
            let offset = rng.random_range(0.0..2.0 * PI);
            let centres: Vec<(f64, f64)> = (0..k)
                .map(|c| {
                    let a = offset + 2.0 * PI * c as f64 / k as f64;
                    (0.5 + 0.35 * a.cos(), 0.5 + 0.35 * a.sin())
                })
                .collect();
            let mut pos = Vec::with_capacity(n);
            let mut cluster = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % k;
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                pos.push((
                    centres[c].0 + profile.cluster_spread * dx,
                    centres[c].1 + profile.cluster_spread * dy,
                ));
                cluster.push(c);
            }
            (pos, cluster)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let p = SynthProfile::default();
        let a = synth_generate(8, 2, 5, 11, &p).unwrap();
        let b = synth_generate(8, 2, 5, 11, &p).unwrap();
        assert_eq!(a.series.values().data(), b.series.values().data());
        assert_eq!(a.distance_graph, b.distance_graph);
        let c = synth_generate(8, 2, 5, 12, &p).unwrap();
        assert_ne!(a.series.values().data(), c.series.values().data());
    }

    #[test]
    fn shapes_and_graph_pair() {
        let d = synth_generate(10, 3, 5, 1, &SynthProfile::clustered()).unwrap();
        assert_eq!(d.series.values().shape(), &[10, 864, 1]);
        assert_eq!(d.distance_graph.n_edges(), d.binary_graph.n_edges());
        assert!(d.binary_graph.edges().iter().all(|e| e.w == 1.0));
        assert!(d.distance_graph.edges().iter().all(|e| e.w > 0.0 && e.w <= 1.0));
        assert_eq!(d.series.calendar(0), Some((0, 0)));
    }

    #[test]
    fn rejects_single_node() {
        assert!(synth_generate(1, 1, 5, 0, &SynthProfile::default()).is_err());
    }
}
