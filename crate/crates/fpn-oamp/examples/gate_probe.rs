// Dumps desk-scale training data for an external capability probe.

use fpn_oamp::channel::ChannelConfig;
use fpn_oamp::geometry::ArrayGeometry;
use fpn_oamp::measurement::{draw_operator, PilotConfig};
use fpn_oamp::sample_rng;
use fpn_oamp::training::generate_dataset;
use std::io::Write;

fn dump(path: &str, set: &fpn_oamp::training::GeneratedSet) {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).unwrap());
    for j in 0..set.len() {
        let row: Vec<String> = set
            .y
            .column(j)
            .iter()
            .chain(set.gt.column(j).iter())
            .map(|v| format!("{v}"))
            .collect();
        writeln!(f, "{},{}", set.snr_db[j], row.join(",")).unwrap();
    }
}

fn main() {
    let geometry = ArrayGeometry::new(4, 16, 5e-4, 8e-3, 3e11).unwrap();
    let pilot = PilotConfig::default();
    let channel = ChannelConfig::default_desk();
    let seed = 17u64;
    let op = draw_operator(&mut sample_rng(seed, 1 << 62), &geometry, &pilot).unwrap();

    let train = generate_dataset(seed + 1, 8000, &op, &channel, (0.0, 20.0)).unwrap();
    dump("/tmp/desk_train.csv", &train);
    let test = generate_dataset(seed + 3, 500, &op, &channel, (10.0, 10.0)).unwrap();
    dump("/tmp/desk_test10.csv", &test);

    // The measurement matrix, for measurement-consistent estimators.
    let m = op.m_real();
    let mut f = std::io::BufWriter::new(std::fs::File::create("/tmp/desk_m.csv").unwrap());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        writeln!(f, "{}", row.join(",")).unwrap();
    }
    println!("dumped {} train, {} test", train.len(), test.len());
}
