//! Knowledge base: each grid cell becomes a symbolic feature vector, then a
//! pair of per-cell affine layers (1x1 convolutions) lifts it to width `d`.

use rand::Rng;

use crate::gridworld::{Color, Material, Scene, SceneError, Shape, Size};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Features per cell: empty flag, one-hots for shape/color/size/material,
/// and row/column ramps.
pub const CELL_FEATURES: usize = 1 + 3 + 6 + 2 + 2 + 2;

fn ramp(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// `[H*W, CELL_FEATURES]` row-major over `(row, col)`.
pub fn scene_features(scene: &Scene, grid_size: usize) -> std::result::Result<Tensor, SceneError> {
    if scene.grid_size != grid_size {
        return Err(SceneError::GridMismatch {
            got: scene.grid_size,
            want: grid_size,
        });
    }
    scene.validate()?;
    let g = grid_size;
    let mut data = vec![0.0; g * g * CELL_FEATURES];
    for r in 0..g {
        for c in 0..g {
            let f = &mut data[(r * g + c) * CELL_FEATURES..][..CELL_FEATURES];
            match scene.object_at(r, c) {
                None => f[0] = 1.0,
                Some(o) => {
                    f[1 + Shape::ALL.iter().position(|&s| s == o.shape).expect("known shape")] = 1.0;
                    f[4 + Color::ALL.iter().position(|&s| s == o.color).expect("known color")] = 1.0;
                    f[10 + Size::ALL.iter().position(|&s| s == o.size).expect("known size")] = 1.0;
                    f[12 + Material::ALL.iter().position(|&s| s == o.material).expect("known material")] = 1.0;
                }
            }
            f[14] = ramp(r, g);
            f[15] = ramp(c, g);
        }
    }
    Ok(Tensor::new(vec![g * g, CELL_FEATURES], data).expect("shape matches by construction"))
}

#[derive(Clone, Copy, Debug)]
pub struct KbStem {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl KbStem {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Self {
            conv1: Linear::new(store, rng, &format!("{name}.conv1"), CELL_FEATURES, d),
            conv2: Linear::new(store, rng, &format!("{name}.conv2"), d, d),
        }
    }

    /// Lifts stacked cell features `[N, CELL_FEATURES]` to `[N, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, features)?;
        let h = tape.elu(h);
        let h = self.conv2.forward(tape, p, h)?;
        Ok(tape.elu(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Object;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_object_scene(color: Color) -> Scene {
        let o = Object {
            row: 1,
            col: 2,
            shape: Shape::Sphere,
            color,
            size: Size::Small,
            material: Material::Rubber,
        };
        Scene {
            grid_size: 5,
            objects: vec![o, Object { row: 4, col: 0, color: Color::Gray, ..o }],
        }
    }

    fn stem_output(scene: &Scene) -> (Tensor, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stem = KbStem::new(&mut store, &mut rng, "kb", 64);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(scene_features(scene, 5).unwrap());
        let out = stem.forward(&mut tape, &p, f).unwrap();
        (tape.value(out).clone(), store)
    }

    #[test]
    fn output_is_one_row_per_cell() {
        let (k, _) = stem_output(&two_object_scene(Color::Red));
        assert_eq!(k.shape(), &[25, 64]);
        assert!(k.all_finite());
    }

    #[test]
    fn changing_one_object_changes_only_its_row() {
        let (a, _) = stem_output(&two_object_scene(Color::Red));
        let (b, _) = stem_output(&two_object_scene(Color::Blue));
        for r in 0..25 {
            let same = a.row(r) == b.row(r);
            assert_eq!(same, r != 7, "row {r}");
        }
    }

    #[test]
    fn empty_cells_differ_only_by_position() {
        let f = scene_features(&two_object_scene(Color::Red), 5).unwrap();
        assert_eq!(f.row(0)[..14], f.row(24)[..14]);
        assert_eq!(f.row(0)[0], 1.0);
        assert_eq!(f.row(0)[14..], [-1.0, -1.0]);
        assert_eq!(f.row(24)[14..], [1.0, 1.0]);
        assert_eq!(f.row(7)[0], 0.0);
        assert_eq!(f.row(7).iter().take(14).sum::<f64>(), 4.0);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let s = two_object_scene(Color::Red);
        assert_eq!(
            scene_features(&s, 4).unwrap_err(),
            SceneError::GridMismatch { got: 5, want: 4 }
        );
    }
}
