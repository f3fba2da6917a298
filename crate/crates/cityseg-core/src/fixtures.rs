//! Built-in synthetic fixtures: a five-base / ten-subclass city hierarchy
//! and scene generators for the standard experiment setups.
//!
//! * `toy` — three domains annotated at subclass granularity; classes are
//!   separable by color, height and shape, with sibling pairs (tree/bush,
//!   lake/pond, soil/road) kept close enough in color to leave the
//!   fine-grained losses real work.
//! * `conflict` — two domains over the same scene distribution, one
//!   annotated at base granularity and one at subclass granularity; the
//!   setup that breaks flat label merging.
//! * `context` — one domain whose water patches are lakes or ponds with
//!   identical local appearance; ponds carry a small distinct marker post
//!   somewhere in the scene, so only the global branch can tell them apart.
//! * `heldout` — an unseen domain that introduces a new `bus` subclass for
//!   zero-shot and incremental runs.

use std::path::Path;

use crate::error::Result;
use crate::hierarchy::LabelHierarchy;
use crate::pcio::{
    generate_scene, save_cloud, DatasetManifest, DomainData, LayoutEntry, ManifestEntry,
    PointCloud, Primitive, SceneSpec,
};
use crate::training::derive_seed;

/// Node ids of the default hierarchy.
pub mod labels {
    pub const GROUND: u16 = 1;
    pub const VEGETATION: u16 = 2;
    pub const BUILDING: u16 = 3;
    pub const WATER: u16 = 4;
    pub const OBJECT: u16 = 5;
    pub const SOIL: u16 = 6;
    pub const ROAD: u16 = 7;
    pub const TREE: u16 = 8;
    pub const BUSH: u16 = 9;
    pub const HOUSE: u16 = 10;
    pub const TOWER: u16 = 11;
    pub const LAKE: u16 = 12;
    pub const POND: u16 = 13;
    pub const CAR: u16 = 14;
    pub const TRUCK: u16 = 15;
    /// Id the `bus` leaf receives when inserted under `object`.
    pub const BUS: u16 = 16;
}

/// The default five-base / ten-subclass label tree.
pub fn toy_hierarchy() -> LabelHierarchy {
    use labels::*;
    LabelHierarchy::from_rows(vec![
        (0, None, 0, "everything".into()),
        (GROUND, Some(0), 1, "ground".into()),
        (VEGETATION, Some(0), 1, "vegetation".into()),
        (BUILDING, Some(0), 1, "building".into()),
        (WATER, Some(0), 1, "water".into()),
        (OBJECT, Some(0), 1, "object".into()),
        (SOIL, Some(GROUND), 2, "soil".into()),
        (ROAD, Some(GROUND), 2, "road".into()),
        (TREE, Some(VEGETATION), 2, "tree".into()),
        (BUSH, Some(VEGETATION), 2, "bush".into()),
        (HOUSE, Some(BUILDING), 2, "house".into()),
        (TOWER, Some(BUILDING), 2, "tower".into()),
        (LAKE, Some(WATER), 2, "lake".into()),
        (POND, Some(WATER), 2, "pond".into()),
        (CAR, Some(OBJECT), 2, "car".into()),
        (TRUCK, Some(OBJECT), 2, "truck".into()),
    ])
    .expect("static hierarchy is valid")
}

/// One fixture: a tagged hierarchy plus in-memory domain data.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub hierarchy: LabelHierarchy,
    pub datasets: Vec<DomainData>,
}

struct ClassSpec {
    base: u16,
    subclass: u16,
    primitive: Primitive,
    count: u32,
    points: u32,
    color: [f32; 3],
}

fn entry(c: &ClassSpec) -> LayoutEntry {
    LayoutEntry {
        base: c.base,
        subclass: c.subclass,
        primitive: c.primitive.clone(),
        count: c.count,
        points_per_instance: Some(c.points),
        color: c.color,
    }
}

/// Standard class placements; `at_base` relabels every entry to its base
/// class (for base-granularity domains). `scale` multiplies every point
/// count (per-domain density variation). Counts keep the base-class prior
/// mild (~35% ground) so no single class dominates training.
fn city_layout(at_base: bool, scale: f64) -> Vec<LayoutEntry> {
    use labels::*;
    let classes = [
        ClassSpec {
            base: GROUND,
            subclass: ROAD,
            primitive: Primitive::FlatPatch {
                radius: 3.4,
                marker_fraction: 0.0,
                marker_color: [0.0; 3],
            },
            count: 2,
            points: 670,
            color: [0.52, 0.43, 0.28],
        },
        ClassSpec {
            base: VEGETATION,
            subclass: TREE,
            primitive: Primitive::Ellipsoid { radii: [1.6, 1.6, 1.9] },
            count: 3,
            points: 540,
            color: [0.13, 0.44, 0.15],
        },
        ClassSpec {
            base: VEGETATION,
            subclass: BUSH,
            primitive: Primitive::Ellipsoid { radii: [0.8, 0.8, 0.6] },
            count: 3,
            points: 270,
            color: [0.22, 0.55, 0.24],
        },
        ClassSpec {
            base: BUILDING,
            subclass: HOUSE,
            primitive: Primitive::Box3 { size: [4.2, 4.2, 5.0] },
            count: 2,
            points: 720,
            color: [0.66, 0.32, 0.26],
        },
        ClassSpec {
            base: BUILDING,
            subclass: TOWER,
            primitive: Primitive::Box3 { size: [2.4, 2.4, 14.0] },
            count: 1,
            points: 690,
            color: [0.58, 0.38, 0.50],
        },
        ClassSpec {
            base: WATER,
            subclass: LAKE,
            primitive: Primitive::FlatPatch {
                radius: 4.4,
                marker_fraction: 0.0,
                marker_color: [0.0; 3],
            },
            count: 1,
            points: 770,
            color: [0.10, 0.32, 0.68],
        },
        ClassSpec {
            base: WATER,
            subclass: POND,
            primitive: Primitive::FlatPatch {
                radius: 1.8,
                marker_fraction: 0.0,
                marker_color: [0.0; 3],
            },
            count: 2,
            points: 340,
            color: [0.18, 0.42, 0.60],
        },
        ClassSpec {
            base: OBJECT,
            subclass: CAR,
            primitive: Primitive::Box3 { size: [1.8, 1.2, 1.4] },
            count: 3,
            points: 210,
            color: [0.82, 0.72, 0.14],
        },
        ClassSpec {
            base: OBJECT,
            subclass: TRUCK,
            primitive: Primitive::Box3 { size: [2.6, 1.6, 2.6] },
            count: 2,
            points: 260,
            color: [0.34, 0.32, 0.38],
        },
    ];
    let scaled = |points: u32| ((points as f64 * scale).round() as u32).max(8);
    let mut layout = vec![LayoutEntry {
        base: GROUND,
        subclass: if at_base { GROUND } else { SOIL },
        primitive: Primitive::GroundPlane,
        count: 1,
        points_per_instance: Some(scaled(2600)),
        color: [0.44, 0.33, 0.18],
    }];
    layout.extend(classes.iter().map(|c| {
        let mut e = entry(c);
        e.points_per_instance = Some(scaled(c.points));
        if at_base {
            e.subclass = c.base;
        }
        e
    }));
    layout
}

fn scenes_for(
    hierarchy: &LabelHierarchy,
    layout: &[LayoutEntry],
    extent: [f32; 3],
    density: f32,
    color_noise: f32,
    domain_id: u16,
    base_seed: u64,
    n_train: usize,
    n_eval: usize,
) -> Result<DomainData> {
    let make = |idx: u64| -> Result<PointCloud> {
        let spec = SceneSpec {
            extent,
            density,
            class_layout: layout.to_vec(),
            seed: derive_seed(base_seed, &[domain_id as u64, idx]),
            color_noise,
            domain_id,
        };
        generate_scene(&spec, hierarchy)
    };
    let mut train = Vec::new();
    for i in 0..n_train {
        train.push(make(i as u64)?);
    }
    let mut eval = Vec::new();
    for i in 0..n_eval {
        eval.push(make(1000 + i as u64)?);
    }
    Ok(DomainData {
        domain_id,
        annotated_levels: vec![2],
        train,
        eval,
    })
}

/// Three subclass-annotated domains with varying density, extent and color
/// noise; roughly 2×10⁵ points in total.
pub fn toy(seed: u64) -> Result<Fixture> {
    let mut hierarchy = toy_hierarchy();
    let mut datasets = Vec::new();
    for (domain_id, (scale, extent, noise)) in
        [(0.85, 26.0, 0.015), (1.0, 28.0, 0.02), (1.15, 30.0, 0.025)]
            .into_iter()
            .enumerate()
    {
        let layout = city_layout(false, scale);
        let data = scenes_for(
            &hierarchy,
            &layout,
            [extent, extent, 16.0],
            8.0,
            noise,
            domain_id as u16,
            derive_seed(seed, &[7, domain_id as u64]),
            4,
            2,
        )?;
        hierarchy.apply_domain_levels(domain_id as u16, &[2]);
        datasets.push(data);
    }
    Ok(Fixture { hierarchy, datasets })
}

/// Two domains over the same scene distribution with conflicting label
/// granularity: domain 0 annotates base classes, domain 1 subclasses.
pub fn conflict(seed: u64) -> Result<Fixture> {
    let mut hierarchy = toy_hierarchy();
    let mut datasets = Vec::new();
    for (domain_id, at_base) in [(0u16, true), (1u16, false)] {
        let layout = city_layout(at_base, 0.6);
        let mut data = scenes_for(
            &hierarchy,
            &layout,
            [22.0, 22.0, 16.0],
            7.0,
            0.02,
            domain_id,
            derive_seed(seed, &[11, domain_id as u64]),
            3,
            2,
        )?;
        let levels = if at_base { vec![1u8] } else { vec![2u8] };
        data.annotated_levels = levels.clone();
        hierarchy.apply_domain_levels(domain_id, &levels);
        datasets.push(data);
    }
    Ok(Fixture { hierarchy, datasets })
}

/// One domain whose scenes contain either lakes or ponds. Both share the
/// water color and patch radius; pond scenes hide a small magenta marker
/// post at each patch center, so pond-vs-lake is invisible to a local
/// window and must come through cross-attention over the global branch.
pub fn context(seed: u64) -> Result<Fixture> {
    use labels::*;
    let mut hierarchy = toy_hierarchy();
    let water_color = [0.13, 0.36, 0.64];
    let scene_layout = |pond: bool| -> Vec<LayoutEntry> {
        let water = if pond {
            ClassSpec {
                base: WATER,
                subclass: POND,
                primitive: Primitive::FlatPatch {
                    radius: 3.2,
                    marker_fraction: 0.05,
                    marker_color: [0.92, 0.10, 0.88],
                },
                count: 3,
                points: 430,
                color: water_color,
            }
        } else {
            ClassSpec {
                base: WATER,
                subclass: LAKE,
                primitive: Primitive::FlatPatch {
                    radius: 3.2,
                    marker_fraction: 0.0,
                    marker_color: [0.0; 3],
                },
                count: 3,
                points: 430,
                color: water_color,
            }
        };
        vec![
            LayoutEntry {
                base: GROUND,
                subclass: SOIL,
                primitive: Primitive::GroundPlane,
                count: 1,
                points_per_instance: Some(1300),
                color: [0.44, 0.33, 0.18],
            },
            entry(&ClassSpec {
                base: VEGETATION,
                subclass: TREE,
                primitive: Primitive::Ellipsoid { radii: [1.5, 1.5, 1.8] },
                count: 2,
                points: 260,
                color: [0.13, 0.44, 0.15],
            }),
            entry(&ClassSpec {
                base: OBJECT,
                subclass: CAR,
                primitive: Primitive::Box3 { size: [1.8, 1.2, 1.4] },
                count: 1,
                points: 120,
                color: [0.82, 0.72, 0.14],
            }),
            entry(&water),
        ]
    };
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for i in 0..10u64 {
        let pond = i % 2 == 0;
        let spec = SceneSpec {
            extent: [20.0, 20.0, 12.0],
            density: 6.0,
            class_layout: scene_layout(pond),
            seed: derive_seed(seed, &[13, i]),
            color_noise: 0.02,
            domain_id: 0,
        };
        let cloud = generate_scene(&spec, &hierarchy)?;
        if i < 6 {
            train.push(cloud);
        } else {
            eval.push(cloud);
        }
    }
    hierarchy.apply_domain_levels(0, &[2]);
    Ok(Fixture {
        hierarchy,
        datasets: vec![DomainData {
            domain_id: 0,
            annotated_levels: vec![2],
            train,
            eval,
        }],
    })
}

/// An unseen domain introducing a new `bus` subclass under `object`
/// (about a tenth of its points), for zero-shot and incremental runs.
/// Scenes are generated against the extended hierarchy; the returned
/// fixture's hierarchy is the *unextended* tree (insertion happens in the
/// run under test and deterministically assigns [`labels::BUS`]).
pub fn heldout(seed: u64) -> Result<Fixture> {
    use labels::*;
    let base_hierarchy = toy_hierarchy();
    let (extended, bus_id) = base_hierarchy.insert_leaf(OBJECT, "bus")?;
    debug_assert_eq!(bus_id, BUS);
    let layout = vec![
        LayoutEntry {
            base: GROUND,
            subclass: SOIL,
            primitive: Primitive::GroundPlane,
            count: 1,
            points_per_instance: Some(1500),
            color: [0.44, 0.33, 0.18],
        },
        entry(&ClassSpec {
            base: VEGETATION,
            subclass: TREE,
            primitive: Primitive::Ellipsoid { radii: [1.6, 1.6, 1.9] },
            count: 2,
            points: 320,
            color: [0.13, 0.44, 0.15],
        }),
        entry(&ClassSpec {
            base: BUILDING,
            subclass: HOUSE,
            primitive: Primitive::Box3 { size: [4.2, 4.2, 5.0] },
            count: 2,
            points: 420,
            color: [0.66, 0.32, 0.26],
        }),
        entry(&ClassSpec {
            base: OBJECT,
            subclass: CAR,
            primitive: Primitive::Box3 { size: [1.8, 1.2, 1.4] },
            count: 2,
            points: 130,
            color: [0.82, 0.72, 0.14],
        }),
        LayoutEntry {
            base: OBJECT,
            subclass: BUS,
            primitive: Primitive::Box3 { size: [7.0, 2.2, 3.2] },
            count: 2,
            points_per_instance: Some(330),
            color: [0.85, 0.45, 0.12],
        },
    ];
    let make = |idx: u64| -> Result<PointCloud> {
        let spec = SceneSpec {
            extent: [24.0, 24.0, 14.0],
            density: 8.0,
            class_layout: layout.clone(),
            seed: derive_seed(seed, &[17, idx]),
            color_noise: 0.02,
            domain_id: 9,
        };
        generate_scene(&spec, &extended)
    };
    let train = vec![make(0)?, make(1)?, make(2)?];
    let eval = vec![make(1000)?, make(1001)?];
    let mut hierarchy = base_hierarchy;
    // the held-out domain annotates subclasses; tags apply to existing
    // nodes, the bus leaf is tagged on insertion by the consuming run
    hierarchy.apply_domain_levels(9, &[2]);
    Ok(Fixture {
        hierarchy,
        datasets: vec![DomainData {
            domain_id: 9,
            annotated_levels: vec![2],
            train,
            eval,
        }],
    })
}

/// Write a fixture to disk: per-domain directories of CSPC scenes plus
/// `hierarchy.tsv` and `manifest.tsv`.
pub fn write_fixture(fixture: &Fixture, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, 0, e))?;
    fixture.hierarchy.save(&dir.join("hierarchy.tsv"))?;
    let mut manifest = DatasetManifest::default();
    for dataset in &fixture.datasets {
        let sub = format!("domain{}", dataset.domain_id);
        let sub_dir = dir.join(&sub);
        std::fs::create_dir_all(&sub_dir).map_err(|e| crate::error::Error::io(&sub_dir, 0, e))?;
        for (i, cloud) in dataset.train.iter().enumerate() {
            save_cloud(cloud, &sub_dir.join(format!("train_{i:03}.cspc")))?;
        }
        for (i, cloud) in dataset.eval.iter().enumerate() {
            save_cloud(cloud, &sub_dir.join(format!("eval_{i:03}.cspc")))?;
        }
        manifest.entries.push(ManifestEntry {
            dir: sub.into(),
            domain_id: dataset.domain_id,
            annotated_levels: dataset.annotated_levels.clone(),
        });
    }
    manifest.save(&dir.join("manifest.tsv"))
}

/// Parse a fixture name from the CLI/config.
pub fn by_name(name: &str, seed: u64) -> Result<Fixture> {
    match name {
        "toy" => toy(seed),
        "conflict" => conflict(seed),
        "context" => context(seed),
        "heldout" => heldout(seed),
        other => Err(crate::error::Error::Config(format!(
            "unknown fixture {other:?} (expected toy|conflict|context|heldout)"
        ))),
    }
}
