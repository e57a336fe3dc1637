//! Build a trie from a tiny relation, print its arrays and round-trip the
//! binary dump.

use ctjoin::trie::{Relation, TrieIndex};

fn main() -> ctjoin::error::Result<()> {
    let rel = Relation::from_edges("R", [(1, 1), (1, 2)]);
    let trie = TrieIndex::build(&rel);
    for (i, lvl) in trie.levels().iter().enumerate() {
        println!("level {i}: values {:?} offsets {:?}", lvl.values, lvl.child_offsets);
    }
    println!("children of x=1: {:?}", trie.children(0, 0)?);

    // same data with the columns swapped
    let rev = TrieIndex::build_permuted(&rel, &[1, 0]);
    println!("reversed level 0: {:?}", rev.levels()[0].values);

    let mut buf = Vec::new();
    trie.write_dump(&mut buf)?;
    let back = TrieIndex::read_dump(&mut buf.as_slice())?;
    assert_eq!(back, trie);
    println!("dump: {} bytes, round trip ok", buf.len());
    Ok(())
}
