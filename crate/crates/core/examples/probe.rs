use corridor_lfd::dataset::build_dataset;
use corridor_lfd::sim::WorldConfig;

fn main() {
    let ds = build_dataset(&WorldConfig::default(), 12, 18).unwrap();
    println!("n_train={}", ds.train().len());
    for d in ds.demonstrations.iter() {
        println!(
            "offset {:+.4}  kind {:<4}  cor_net_dx {:+.4}  obj_x_after {:+.4}  pre_end [{:+.3} {:+.3} {:.3}]  post_start [{:+.3} {:+.3} {:.3}]",
            d.corridor_offset,
            d.correction_kind.as_str(),
            d.cor.net_displacement(0),
            d.object_x_after_cor,
            d.critical_point()[0], d.critical_point()[1], d.critical_point()[2],
            d.post.points[0].values[0], d.post.points[0].values[1], d.post.points[0].values[2],
        );
    }
}
