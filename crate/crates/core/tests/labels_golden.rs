use stableseg_core::labels::{builtin_mapping, remap_labels, Dataset, MappingTable, OVERLAP_CLASSES};
use stableseg_core::IGNORE;

fn ids(cell: &str) -> Vec<u8> {
    cell.split('+').map(|s| s.parse().unwrap()).collect()
}

#[test]
fn builtin_tables_reproduce_every_row() {
    let rows: Vec<Vec<&str>> = include_str!("golden/overlap_mapping.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 15);
    let tables = Dataset::ALL.map(builtin_mapping);
    let mut expected_entries = [0usize; 3];
    for row in &rows {
        let overlap: u8 = row[0].parse().unwrap();
        assert_eq!(OVERLAP_CLASSES[overlap as usize], row[1]);
        for (d, table) in tables.iter().enumerate() {
            for src in ids(row[2 + d]) {
                assert_eq!(table.lookup(src), overlap, "{} id {src}", table.dataset);
                expected_entries[d] += 1;
            }
        }
    }
    for (d, table) in tables.iter().enumerate() {
        assert_eq!(table.pairs().len(), expected_entries[d], "{} has extra entries", table.dataset);
    }
}

#[test]
fn remap_never_leaves_overlap_space() {
    for d in Dataset::ALL {
        let t = builtin_mapping(d);
        let all: Vec<u8> = (0..=255).collect();
        assert!(remap_labels(&all, &t).iter().all(|&l| l < 15 || l == IGNORE));
    }
}

#[test]
fn remap_matches_lookup_oracle() {
    let t = builtin_mapping(Dataset::CamVid);
    let frame: Vec<u8> = (0..64).map(|i| ((i * 37) % 33) as u8).chain([IGNORE]).collect();
    let oracle: Vec<u8> = frame
        .iter()
        .map(|&l| {
            t.pairs()
                .into_iter()
                .find(|&(s, _)| s == l)
                .map_or(IGNORE, |(_, d)| d)
        })
        .collect();
    assert_eq!(remap_labels(&frame, &t), oracle);
}

#[test]
fn identity_composition_is_idempotent() {
    let id = MappingTable::identity();
    let t = builtin_mapping(Dataset::ApolloScape);
    let src: Vec<u8> = (0..40).collect();
    let once = remap_labels(&src, &t);
    assert_eq!(remap_labels(&once, &id), once);
}
