use std::fs;
use std::path::Path;

use ca_core::plot::emit_plots;

fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let pts = l
                .split("points=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap();
            pts.split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

fn seed_dir(dir: &Path) {
    fs::write(
        dir.join("confidence.csv"),
        "t,mean_confidence\n0,0.41\n10,0.8\n20,0.95\n",
    )
    .unwrap();
    fs::write(
        dir.join("ablation_a.csv"),
        "a,auroc_near,auroc_far,auroc\n0,0.6,0.5,0.55\n10,0.7,0.4,0.55\n",
    )
    .unwrap();
}

#[test]
fn alpha_family_has_five_curves() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path());
    emit_plots(dir.path()).unwrap();
    let svg = fs::read_to_string(dir.path().join("alpha.svg")).unwrap();
    assert_eq!(polylines(&svg).len(), 5);
}

/// SVG y grows downward, so a decreasing φ shows as non-decreasing pixel y.
#[test]
fn phi_curve_decreases_left_to_right() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path());
    emit_plots(dir.path()).unwrap();
    let lines = polylines(&fs::read_to_string(dir.path().join("phi.svg")).unwrap());
    assert_eq!(lines.len(), 1);
    let pts = &lines[0];
    assert!(pts.len() > 10);
    assert!(
        pts.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1),
        "{pts:?}"
    );
}

#[test]
fn regeneration_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    seed_dir(dir.path());
    let first: Vec<Vec<u8>> = emit_plots(dir.path())
        .unwrap()
        .iter()
        .map(|p| fs::read(p).unwrap())
        .collect();
    let again = emit_plots(dir.path()).unwrap();
    assert_eq!(again.len(), 4);
    for (p, bytes) in again.iter().zip(&first) {
        assert_eq!(&fs::read(p).unwrap(), bytes, "{}", p.display());
    }
}

#[test]
fn missing_csv_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit_plots(dir.path()).unwrap_err().to_string();
    assert!(err.contains("confidence.csv"), "{err}");
}
