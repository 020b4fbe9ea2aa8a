//! Times operator construction and one forward/adjoint pair on the default phantom.

use std::time::Instant;

use arcplan_core::{ct_normalize, generate_phantom, ArcConfig, BeamModel, DoseOperator, PhantomSpec};

fn main() {
    let spec = PhantomSpec::default();
    let t = Instant::now();
    let phantom = generate_phantom::<f64>(&spec).unwrap();
    println!("phantom      {:>8.1} ms", t.elapsed().as_secs_f64() * 1e3);
    let ct = ct_normalize(&phantom.ct);
    let geoms = ArcConfig::default().build(phantom.isocenter).unwrap();
    let t = Instant::now();
    let op = DoseOperator::new(&ct, &geoms, &BeamModel::default()).unwrap();
    println!("operator     {:>8.1} ms  ({} couplings)", t.elapsed().as_secs_f64() * 1e3, op.nnz());
    let mut f = op.zero_fluence();
    f.values.iter_mut().for_each(|v| *v = 1.0);
    let t = Instant::now();
    let d = op.forward(&f).unwrap();
    println!("forward      {:>8.1} ms", t.elapsed().as_secs_f64() * 1e3);
    let t = Instant::now();
    let g = op.adjoint(&d).unwrap();
    println!("adjoint      {:>8.1} ms  (sum {:.3e})", t.elapsed().as_secs_f64() * 1e3, g.total());
}
