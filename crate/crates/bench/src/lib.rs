//! Fixtures shared by the benchmarks.

use pego_core::data::{generate_dataset, make_batch};
use pego_core::pego::inject_groups;
use pego_core::{DataConfig, Rng, Sample, VitConfig, VitModel};

/// The desk-scale backbone with a fresh N = 4, r = 4 group on every projection,
/// and one batch of 8 images from each of three domains.
pub fn training_fixture() -> (VitModel, Vec<Sample>) {
    let mut rng = Rng::new(0);
    let mut model = pego_core::init_vit(&VitConfig::default(), &mut rng).expect("default config is valid");
    inject_groups(&mut model, 4, 4, &mut rng).expect("rank fits the width");
    let data = DataConfig {
        per_class: 8,
        ..DataConfig::default()
    };
    let ds = generate_dataset(&data, 0).expect("default data config is valid");
    let sources = ds.subset(&[0, 1, 2]);
    (model, make_batch(&sources, 8, &mut rng))
}
