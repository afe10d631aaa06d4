use rand::Rng as _;
use rnf_core::analysis::*;
use rnf_core::nn::{Dense, Model};
use rnf_core::rng;

fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::from_seed(seed);
    (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn kpca_commutes_with_permutation_up_to_sign() {
    let z = cloud(60, 6, 1);
    let base = kpca_project(&z, &KpcaConfig::default()).unwrap();
    let perm: Vec<usize> = (0..z.len()).rev().collect();
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
    let proj = kpca_project(&shuffled, &KpcaConfig::default()).unwrap();
    for k in 0..2 {
        assert!((proj.eigenvalues[k] - base.eigenvalues[k]).abs() < 1e-9);
        let sign = if proj.coords[0][k] * base.coords[perm[0]][k] < 0.0 { -1.0 } else { 1.0 };
        for (j, &i) in perm.iter().enumerate() {
            assert!((proj.coords[j][k] - sign * base.coords[i][k]).abs() < 1e-8);
        }
    }
}

#[test]
fn kpca_residuals_on_larger_input() {
    let z = cloud(200, 10, 2);
    let proj = kpca_project(&z, &KpcaConfig::default()).unwrap();
    for k in 0..2 {
        let v = &proj.eigenvectors[k];
        let r = eigen_residual(&proj.centered_kernel, proj.eigenvalues[k], v);
        assert!(r <= 1e-6 * v.iter().map(|x| x * x).sum::<f64>().sqrt(), "residual {r}");
    }
}

#[test]
fn kpca_csv_has_one_row_per_point() {
    let z = cloud(10, 3, 3);
    let proj = kpca_project(&z, &KpcaConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kpca.csv");
    let groups: Vec<Option<usize>> = (0..10).map(|i| (i != 4).then_some(i % 2)).collect();
    write_kpca_csv(&path, &proj, &groups, &[0; 10], &[1; 10]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,coord1,coord2,a,y,yhat");
    assert_eq!(lines.len(), 11);
    assert!(lines[5].starts_with("4,") && lines[5].contains(",,0,1"));
}

#[test]
fn mimic_probe_agrees_with_near_linear_head() {
    // Identity-like encoder and a single affine head layer.
    let mut enc = Dense::zeros(3, 3);
    enc.weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    enc.biases = vec![3.0; 3];
    let mut head = Dense::zeros(3, 2);
    head.weights = vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5];
    head.biases = vec![0.0, -3.0 + 6.0 - 1.5];
    let model = Model::from_layers(vec![enc, head], 1, 0.0).unwrap();
    let x = cloud(300, 3, 4);
    let groups: Vec<usize> = x.iter().map(|v| usize::from(v[2] > 0.0)).collect();
    let report = probe_model(&model, &x, &groups, 1, &ProbeConfig { epochs: 400, ..Default::default() }).unwrap();
    assert!(report.mimic_agreement >= 0.95, "agreement {}", report.mimic_agreement);
    assert!(report.sensitive_accuracy >= 0.95);
    assert!(report.similarity.is_defined());
}

#[test]
fn probe_is_deterministic_per_seed() {
    let z = cloud(50, 4, 5);
    let t: Vec<usize> = z.iter().map(|v| usize::from(v[0] > 0.3)).collect();
    let cfg = ProbeConfig { seed: 3, ..Default::default() };
    assert_eq!(fit_linear_probe(&z, &t, 2, &cfg).unwrap(), fit_linear_probe(&z, &t, 2, &cfg).unwrap());
    let other = ProbeConfig { seed: 4, ..Default::default() };
    assert_ne!(fit_linear_probe(&z, &t, 2, &cfg).unwrap(), fit_linear_probe(&z, &t, 2, &other).unwrap());
}

#[test]
fn detuned_head_still_satisfies_bound_with_measured_constants() {
    let mut r = rng::from_seed(6);
    let mut failures = 0;
    for inst in 0..40 {
        let mut model = Model::new(&[4, 6, 2], 1, 0.0, inst).unwrap();
        // Steep head: large midpoint gradients.
        for w in &mut model.layers_mut()[1].weights {
            *w *= 8.0;
        }
        let pairs: Vec<TheoremPair> = (0..30)
            .map(|_| {
                let x1: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                let x2: Vec<f64> = x1.iter().map(|v| v + r.random_range(-0.05..0.05)).collect();
                let p1: f64 = r.random_range(0.0..1.0);
                let p2 = (p1 + r.random_range(0.01..0.1)).min(1.0);
                TheoremPair { x1, x2, p1, p2 }
            })
            .collect();
        let (inst, verdict) = verify_theorem_bound(&model, &pairs).unwrap();
        assert!(inst.epsilon_c > 0.0);
        match verdict {
            BoundVerdict::Pass => {}
            BoundVerdict::Fail => failures += 1,
            BoundVerdict::HypothesisViolation(why) => panic!("{why}"),
        }
    }
    assert!(failures * 20 <= 40, "{failures} of 40 failed");
}
