//! Loads a label hierarchy, inspects its closures, and grows it with a new
//! subtree.

use hyciss::presets;
use hyciss::taxonomy::{NodeRecord, Taxonomy};

fn main() -> hyciss::Result<()> {
    let tax = presets::taxonomy(presets::ENDOVIS_LIKE_12)?;
    println!("{} classes, {} leaves, {} levels", tax.num_classes(), tax.leaves().len(), tax.num_levels());
    for &v in tax.classes() {
        let name = tax.name(v).unwrap_or("?");
        let anc: Vec<&str> = tax.ancestors(v)?.iter().filter_map(|&a| tax.name(a)).collect();
        println!("  {v:>3} {name:<22} depth {} ancestors {anc:?}", tax.depth(v)?);
    }

    let doc = r#"{"nodes": [
        {"id": 0, "name": "root", "parent": null},
        {"id": 1, "name": "tissue", "parent": 0},
        {"id": 2, "name": "instrument", "parent": 0},
        {"id": 3, "name": "shaft", "parent": 2}
    ]}"#;
    let small = Taxonomy::from_json(doc)?;
    let grown = small.grow(&[NodeRecord::new(4, "clasper", Some(2))])?;
    println!("grown: descendants of instrument = {:?}", grown.descendants(2)?);
    println!("targets for a clasper pixel over {:?}: {:?}", grown.classes(), grown.node_targets(4)?);
    println!("flattened keeps only leaves: {:?}", grown.flattened().classes());

    let bad = r#"{"nodes": [{"id": 0, "name": "a", "parent": null}, {"id": 1, "name": "b", "parent": 7}]}"#;
    println!("dangling parent: {}", Taxonomy::from_json(bad).unwrap_err());
    Ok(())
}
