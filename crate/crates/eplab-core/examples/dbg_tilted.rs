// debug escalation behavior for probit
use eplab_core::expfam::{GaussianDensity1D, NaturalParams1D};
use eplab_core::sites::probit_site;
use eplab_core::tilted::{tilted_moments_quadrature, QuadratureConfig, CenterOn};

fn main() {
    let cav = GaussianDensity1D::new(NaturalParams1D::new(0.5, 0.15)).unwrap();
    let site = probit_site(1.0);
    for nodes in [61usize, 121, 241, 481, 961, 1921] {
        let cfg = QuadratureConfig { nodes, expansion_passes: 3, center_on: CenterOn::Refined, tail_width: 10.0 };
        // bypass escalation by calling with MAX... can't; call with base nodes and see
        match tilted_moments_quadrature(&site, &cav, &cfg) {
            Ok(m) => println!("{nodes}: logz={:.15} mean={:.15} var={:.15}", m.log_z, m.mean, m.variance),
            Err(e) => println!("{nodes}: ERR {e}"),
        }
    }
}
