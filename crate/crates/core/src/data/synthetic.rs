//! Generated image classes for tests and smoke runs.

use rand::Rng;

use crate::seed::{self, Stream};
use crate::tensor::Tensor;

use super::{Dataset, Partition};

/// `classes` classes with `per_class[p]` items each in the train, valid and
/// test partitions. Each class has a random prototype in `[0, 1]`; items are
/// the prototype plus uniform noise of half-width 0.25, clamped.
pub fn synthetic_images(
    classes: usize,
    per_class: [usize; 3],
    shape: &[usize],
    seed: u64,
) -> Dataset {
    let mut rng = seed::rng(seed, Stream::Init, 0x0053_594e);
    let n: usize = shape.iter().product();
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0.5..1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    let mut partitions = Vec::new();
    for (p, &count) in [Partition::Train, Partition::Valid, Partition::Test]
        .iter()
        .zip(&per_class)
    {
        for _ in 0..count {
            for (c, proto) in prototypes.iter().enumerate() {
                items.push(Tensor::from_fn(shape, |i| {
                    (proto[i] + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0)
                }));
                labels.push(c);
                partitions.push(*p);
            }
        }
    }
    Dataset::new(
        "synthetic",
        items,
        labels,
        partitions,
        (0..classes).map(|c| format!("class{c}")).collect(),
    )
    .expect("generated dataset is consistent")
}
