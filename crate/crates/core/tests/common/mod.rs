#![allow(dead_code)]

use autodiff::AutodiffError;

/// Lifts a library error into the error type gradient checks expect.
pub fn ad<T>(r: nerfrestore::Result<T>) -> autodiff::Result<T> {
    r.map_err(|e| AutodiffError::InvalidArgument {
        op: "nerfrestore",
        msg: e.to_string(),
    })
}

/// A configuration small enough to run every stage in seconds.
pub const TINY: &str = "
scene.resolution = 48
scene.n_train = 6
scene.n_test = 2
scene.spp = 2
scene.reference_samples = 48
grid.resolution = 12
grid.train_samples = 32
grid.eval_samples = 48
grid.rays_per_step = 256
codec.width = 16
codec.steps = 60
codec.patches = 256
prior.steps = 20
prior.batch = 4
diffusion.channels = 8,16,16
diffusion.temb_dim = 16
diffusion.steps = 4
stage1.steps = 60
stage1.diffusion_batch = 2
stage2.steps = 6
stage2.batch = 2
stage2.sample_steps = 4
stage2.pool = 8
stage2.val = 4
stage2.cfw_features = 8
stage2.cfw_growth = 4
eval.interval = 20
";

pub fn tiny_config() -> nerfrestore::config::RunConfig {
    nerfrestore::config::RunConfig::parse_str(TINY).unwrap()
}
