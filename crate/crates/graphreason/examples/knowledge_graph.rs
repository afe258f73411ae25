//! Build and inspect the class knowledge graph: a vocabulary of class
//! names plus typed, directed edge matrices. Shows the default graph that
//! ships with the synthetic benchmark, inverse-edge augmentation, the
//! row-normalized propagation matrices the reasoner multiplies with, and
//! the TSV round trip used by `gen-data`.
//!
//! ```text
//! cargo run --example knowledge_graph
//! ```

use graphreason::kg::{ClassVocabulary, KnowledgeGraph, INVERSE_SUFFIX};
use graphreason::scenes::{class_names, default_knowledge_graph};

fn show_matrix(label: &str, names: &[String], at: impl Fn(usize, usize) -> f64) {
    println!("  {label}:");
    let short: Vec<String> = names.iter().map(|n| n.chars().take(6).collect()).collect();
    print!("  {:>8}", "");
    for s in &short {
        print!(" {s:>6}");
    }
    println!();
    for (i, s) in short.iter().enumerate() {
        print!("  {s:>8}");
        for j in 0..names.len() {
            let v = at(i, j);
            if v == 0.0 {
                print!(" {:>6}", ".");
            } else {
                print!(" {v:>6.2}");
            }
        }
        println!();
    }
}

fn main() {
    // --- the benchmark's built-in graph --------------------------------
    let vocab = ClassVocabulary::new(class_names(8)).unwrap();
    let mut kg = default_knowledge_graph(&vocab);
    println!("classes: {}", vocab.names().join(", "));
    println!("\nedge list (as stored, directed):");
    print!("{}", kg.to_tsv());

    // --- inverse edges and row normalization ----------------------------
    // Directed relations also propagate evidence against the arrow: each
    // directed type gains a transposed twin before rows are normalized
    // into averaging weights. 'is-part-of' lets each part look up its
    // whole; 'is-part-of-inv' lets the whole vouch for its parts.
    kg.add_inverse_edges();
    println!("\nafter inverse augmentation the edge types are:");
    let mut types: Vec<&str> = kg.edge_types().collect();
    types.sort();
    for name in &types {
        let dir = if kg.is_directed(name).unwrap() {
            "directed"
        } else {
            "symmetric"
        };
        println!("  {name:<16} ({dir})");
    }
    println!("(symmetric types are left alone; the inverse suffix is '{INVERSE_SUFFIX}')");

    let norm = kg.row_normalized();
    let names = vocab.names().to_vec();
    let part_of = norm.matrix("is-part-of").unwrap();
    println!();
    show_matrix("row-normalized is-part-of", &names, |i, j| part_of.at(i, j));
    let sim = norm.matrix("similar-to").unwrap();
    println!();
    show_matrix("row-normalized similar-to", &names, |i, j| sim.at(i, j));

    // --- building a graph by hand --------------------------------------
    let zoo = ClassVocabulary::new(vec![
        "cat".into(),
        "dog".into(),
        "leash".into(),
        "collar".into(),
    ])
    .unwrap();
    let cat = zoo.index_of("cat").unwrap();
    let dog = zoo.index_of("dog").unwrap();
    let leash = zoo.index_of("leash").unwrap();
    let collar = zoo.index_of("collar").unwrap();

    let mut custom = KnowledgeGraph::new(zoo.clone());
    custom.add_symmetric_edge("similar-to", cat, dog, 1.0);
    custom.add_edge("worn-by", collar, cat, 1.0);
    custom.add_edge("worn-by", collar, dog, 1.0);
    custom.add_edge("attached-to", leash, collar, 1.0);
    custom.validate_ready().unwrap();

    println!("\na hand-built graph:");
    print!("{}", custom.to_tsv());
    let worn_norm = custom.row_normalized();
    let worn = worn_norm.matrix("worn-by").unwrap();
    println!();
    show_matrix("row-normalized worn-by", &zoo.names().to_vec(), |i, j| {
        worn.at(i, j)
    });
    println!("(collar spreads its evidence half to cat, half to dog)");

    // --- persistence -----------------------------------------------------
    let dir = std::env::temp_dir().join("graphreason_kg_example");
    std::fs::create_dir_all(&dir).unwrap();
    let kg_path = dir.join("kg.tsv");
    let vocab_path = dir.join("classes.txt");
    custom.save(&kg_path).unwrap();
    zoo.save(&vocab_path).unwrap();
    let reloaded_vocab = ClassVocabulary::load(&vocab_path).unwrap();
    let reloaded = KnowledgeGraph::load(reloaded_vocab, &kg_path).unwrap();
    assert_eq!(reloaded.to_tsv(), custom.to_tsv());
    println!("\nsaved to {} and reloaded byte-identically.", dir.display());
}
