use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{Surface, SurfacePatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    #[default]
    Ascii,
    BinaryLittleEndian,
}

enum Property {
    Float(String, Vec<f32>),
    Int(String, Vec<i32>),
    UChar(String, Vec<u8>),
}

/// A mesh staged for PLY export with optional per-vertex properties.
pub struct PlyMesh {
    vertices: Vec<[f32; 3]>,
    faces: Vec<[u32; 3]>,
    /// Parent vertex id of each exported vertex.
    source: Vec<usize>,
    properties: Vec<Property>,
    comments: Vec<String>,
}

impl PlyMesh {
    pub fn from_surface(s: &Surface) -> Self {
        PlyMesh {
            vertices: s.vertices.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
            faces: s.faces.clone(),
            source: (0..s.n_vertices()).collect(),
            properties: Vec::new(),
            comments: Vec::new(),
        }
    }

    /// Members of the patch and the faces they induce, renumbered compactly.
    pub fn from_patch(p: &SurfacePatch) -> Self {
        let s = p.parent();
        let members = p.members();
        let mut new_id = vec![u32::MAX; s.n_vertices()];
        for (i, &v) in members.iter().enumerate() {
            new_id[v as usize] = i as u32;
        }
        PlyMesh {
            vertices: members
                .iter()
                .map(|&v| {
                    let q = s.vertices[v as usize];
                    [q.x as f32, q.y as f32, q.z as f32]
                })
                .collect(),
            faces: p
                .induced_faces()
                .iter()
                .map(|&f| s.faces[f as usize].map(|v| new_id[v as usize]))
                .collect(),
            source: members.iter().map(|&v| v as usize).collect(),
            properties: Vec::new(),
            comments: Vec::new(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    fn pick<T: Copy>(&self, per_parent: &[T]) -> Vec<T> {
        self.source.iter().map(|&v| per_parent[v]).collect()
    }

    /// Float property given per parent vertex.
    pub fn with_float(mut self, name: &str, per_parent: &[f32]) -> Self {
        let v = self.pick(per_parent);
        self.properties.push(Property::Float(name.into(), v));
        self
    }

    pub fn with_int(mut self, name: &str, per_parent: &[i32]) -> Self {
        let v = self.pick(per_parent);
        self.properties.push(Property::Int(name.into(), v));
        self
    }

    pub fn with_flag(mut self, name: &str, per_parent: &[bool]) -> Self {
        let v = self.pick(per_parent).into_iter().map(u8::from).collect();
        self.properties.push(Property::UChar(name.into(), v));
        self
    }

    pub fn with_comment(mut self, text: &str) -> Self {
        self.comments.push(text.replace(['\n', '\r'], " "));
        self
    }

    pub fn write_to(&self, mut w: impl Write, format: PlyFormat) -> std::io::Result<()> {
        let fmt = match format {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        };
        writeln!(w, "ply\nformat {fmt} 1.0")?;
        for c in &self.comments {
            writeln!(w, "comment {c}")?;
        }
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z")?;
        for p in &self.properties {
            match p {
                Property::Float(n, _) => writeln!(w, "property float {n}")?,
                Property::Int(n, _) => writeln!(w, "property int {n}")?,
                Property::UChar(n, _) => writeln!(w, "property uchar {n}")?,
            }
        }
        writeln!(w, "element face {}", self.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices\nend_header")?;
        match format {
            PlyFormat::Ascii => {
                for (i, v) in self.vertices.iter().enumerate() {
                    write!(w, "{} {} {}", v[0], v[1], v[2])?;
                    for p in &self.properties {
                        match p {
                            Property::Float(_, x) => write!(w, " {}", x[i])?,
                            Property::Int(_, x) => write!(w, " {}", x[i])?,
                            Property::UChar(_, x) => write!(w, " {}", x[i])?,
                        }
                    }
                    writeln!(w)?;
                }
                for f in &self.faces {
                    writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
                }
            }
            PlyFormat::BinaryLittleEndian => {
                for (i, v) in self.vertices.iter().enumerate() {
                    for c in v {
                        w.write_f32::<LittleEndian>(*c)?;
                    }
                    for p in &self.properties {
                        match p {
                            Property::Float(_, x) => w.write_f32::<LittleEndian>(x[i])?,
                            Property::Int(_, x) => w.write_i32::<LittleEndian>(x[i])?,
                            Property::UChar(_, x) => w.write_u8(x[i])?,
                        }
                    }
                }
                for f in &self.faces {
                    w.write_u8(3)?;
                    for &v in f {
                        w.write_i32::<LittleEndian>(v as i32)?;
                    }
                }
            }
        }
        w.flush()
    }

    pub fn write(&self, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f), format)
            .map_err(|e| Error::io(path, e))
    }
}
