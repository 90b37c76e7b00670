//! Plain-text mesh interchange. The format is line oriented:
//!
//! ```text
//! pbemesh 1
//! <x> <y>                 one line per vertex, 17 significant digits
//! <i> <j> <k> <REGION>    one line per triangle, REGION in {MOLECULE, SOLVENT}
//! <i> <j> <TAG>           one line per tagged edge, TAG in {OUTER, INTERFACE}
//! ```
//!
//! Lines are distinguished by token count, so no size header is needed.
//! Vertex order inside a triangle is meaningful (orientation plus refinement
//! edge), and floats round-trip exactly. The edge block is redundant with
//! the derived tags; the reader checks it and rejects inconsistent files.

use super::{EdgeTag, MeshError, Region, TriMesh};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub fn write_pbemesh(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "pbemesh 1")?;
    for v in &mesh.vertices {
        writeln!(w, "{:.16e} {:.16e}", v[0], v[1])?;
    }
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let region = match mesh.regions[t] {
            Region::Molecule => "MOLECULE",
            Region::Solvent => "SOLVENT",
        };
        writeln!(w, "{} {} {} {}", tri[0], tri[1], tri[2], region)?;
    }
    for (e, tag) in mesh.edge_tags.iter().enumerate() {
        if let Some(tag) = tag {
            let word = match tag {
                EdgeTag::Outer => "OUTER",
                EdgeTag::Interface => "INTERFACE",
            };
            writeln!(w, "{} {} {}", mesh.edges[e][0], mesh.edges[e][1], word)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pbemesh(path: &Path) -> Result<TriMesh, MeshError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| MeshError::Format("empty file".into()))??;
    if header.trim() != "pbemesh 1" {
        return Err(MeshError::Format(format!(
            "bad header {:?}, expected \"pbemesh 1\"",
            header
        )));
    }
    let mut vertices: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut tagged: Vec<(usize, usize, EdgeTag)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| MeshError::Format(format!("line {}: {}", lineno + 2, msg));
        match tokens.len() {
            0 => continue,
            2 => {
                let x: f64 = tokens[0]
                    .parse()
                    .map_err(|_| err(format!("bad float {:?}", tokens[0])))?;
                let y: f64 = tokens[1]
                    .parse()
                    .map_err(|_| err(format!("bad float {:?}", tokens[1])))?;
                vertices.push([x, y]);
            }
            4 => {
                let mut idx = [0usize; 3];
                for (k, tok) in tokens[..3].iter().enumerate() {
                    idx[k] = tok
                        .parse()
                        .map_err(|_| err(format!("bad index {:?}", tok)))?;
                }
                let region = match tokens[3] {
                    "MOLECULE" => Region::Molecule,
                    "SOLVENT" => Region::Solvent,
                    other => return Err(err(format!("unknown region {:?}", other))),
                };
                triangles.push(idx);
                regions.push(region);
            }
            3 => {
                let i: usize = tokens[0]
                    .parse()
                    .map_err(|_| err(format!("bad index {:?}", tokens[0])))?;
                let j: usize = tokens[1]
                    .parse()
                    .map_err(|_| err(format!("bad index {:?}", tokens[1])))?;
                let tag = match tokens[2] {
                    "OUTER" => EdgeTag::Outer,
                    "INTERFACE" => EdgeTag::Interface,
                    other => return Err(err(format!("unknown edge tag {:?}", other))),
                };
                tagged.push((i, j, tag));
            }
            n => return Err(err(format!("unexpected token count {}", n))),
        }
    }
    let mesh = TriMesh::from_raw(vertices, triangles, regions)?;
    mesh.validate()?;
    // the edge block must agree with what the triangles imply
    let mut expected: std::collections::HashMap<(usize, usize), EdgeTag> =
        std::collections::HashMap::new();
    for (e, tag) in mesh.edge_tags.iter().enumerate() {
        if let Some(tag) = tag {
            expected.insert((mesh.edges[e][0], mesh.edges[e][1]), *tag);
        }
    }
    if tagged.len() != expected.len() {
        return Err(MeshError::Format(format!(
            "file lists {} tagged edges, mesh implies {}",
            tagged.len(),
            expected.len()
        )));
    }
    for (i, j, tag) in tagged {
        let key = (i.min(j), i.max(j));
        match expected.get(&key) {
            Some(t) if *t == tag => {}
            Some(t) => {
                return Err(MeshError::Format(format!(
                    "edge ({}, {}) tagged {:?} but mesh implies {:?}",
                    i, j, tag, t
                )))
            }
            None => {
                return Err(MeshError::Format(format!(
                    "edge ({}, {}) tagged in file but not distinguished in mesh",
                    i, j
                )))
            }
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_in_square;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = build_disk_in_square(8.0, [0.31, -0.17], 1.0, 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.txt");
        write_pbemesh(&m, &path).unwrap();
        let back = read_pbemesh(&path).unwrap();
        assert_eq!(m.vertices, back.vertices);
        assert_eq!(m.triangles, back.triangles);
        assert_eq!(m.regions, back.regions);
        assert_eq!(m.edge_tags, back.edge_tags);
        // writing again produces identical bytes
        let path2 = dir.path().join("mesh2.txt");
        write_pbemesh(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn rejects_bad_header_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "wrong 1\n0 0\n").unwrap();
        assert!(matches!(read_pbemesh(&path), Err(MeshError::Format(_))));
        std::fs::write(&path, "pbemesh 1\n0.0 0.0 1.0 2.0 3.0\n").unwrap();
        assert!(matches!(read_pbemesh(&path), Err(MeshError::Format(_))));
        std::fs::write(
            &path,
            "pbemesh 1\n0.0 0.0\n1.0 0.0\n0.0 1.0\n0 1 2 PLASMA\n",
        )
        .unwrap();
        assert!(matches!(read_pbemesh(&path), Err(MeshError::Format(_))));
    }

    #[test]
    fn rejects_inconsistent_edge_tags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.txt");
        // single triangle: all three edges are OUTER; mislabel one
        std::fs::write(
            &path,
            "pbemesh 1\n\
             0.0e0 0.0e0\n1.0e0 0.0e0\n0.0e0 1.0e0\n\
             0 1 2 SOLVENT\n\
             0 1 OUTER\n1 2 OUTER\n0 2 INTERFACE\n",
        )
        .unwrap();
        assert!(matches!(read_pbemesh(&path), Err(MeshError::Format(_))));
    }
}
