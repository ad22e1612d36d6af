//! Converter from PASCAL VOC XML annotations.
//!
//! `bndbox` coordinates are copied as-is (no 1-based pixel shift), matching
//! the convention-free box arithmetic used everywhere else.

use roxmltree::{Document, Node};

use super::{GtObject, ImageGt};
use crate::error::{Error, Result};
use crate::geometry::Box;

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text_of(node: Node, name: &str, path: &str) -> Result<String> {
    child(node, name)
        .and_then(|c| c.text())
        .map(|t| t.trim().to_string())
        .ok_or_else(|| Error::Xml(format!("{path}: missing <{name}>")))
}

fn number(node: Node, name: &str, path: &str) -> Result<f64> {
    let t = text_of(node, name, path)?;
    t.parse::<f64>()
        .map_err(|_| Error::Xml(format!("{path}.{name}: not a number: {t:?}")))
}

/// Parses one annotation file. The image id is the file name without
/// extension; object names are mapped through `class_names`.
pub fn voc_xml_to_image(xml: &str, class_names: &[String]) -> Result<ImageGt> {
    let doc = Document::parse(xml).map_err(|e| Error::Xml(e.to_string()))?;
    let root = doc.root_element();
    let filename = text_of(root, "filename", "annotation")?;
    let id = match filename.rsplit_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem.to_string(),
        _ => filename,
    };
    voc_xml_to_image_with_id(xml, class_names, &id)
}

pub fn voc_xml_to_image_with_id(xml: &str, class_names: &[String], id: &str) -> Result<ImageGt> {
    let doc = Document::parse(xml).map_err(|e| Error::Xml(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Xml(format!(
            "expected <annotation> root, got <{}>",
            root.tag_name().name()
        )));
    }
    let size = child(root, "size").ok_or_else(|| Error::Xml("annotation: missing <size>".into()))?;
    let width = number(size, "width", "annotation.size")?;
    let height = number(size, "height", "annotation.size")?;
    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let path = format!("annotation.object[{i}]");
        let name = text_of(obj, "name", &path)?;
        let class = class_names
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Xml(format!("{path}: unknown class {name:?}")))?;
        let difficult = match child(obj, "difficult").and_then(|d| d.text()) {
            Some(t) => t.trim() == "1",
            None => false,
        };
        let bb = child(obj, "bndbox").ok_or_else(|| Error::Xml(format!("{path}: missing <bndbox>")))?;
        let bpath = format!("{path}.bndbox");
        let coords = [
            number(bb, "xmin", &bpath)?,
            number(bb, "ymin", &bpath)?,
            number(bb, "xmax", &bpath)?,
            number(bb, "ymax", &bpath)?,
        ];
        let bbox = Box::from_array(coords).map_err(|e| Error::Xml(format!("{bpath}: {e}")))?;
        objects.push(GtObject {
            class,
            bbox,
            difficult,
        });
    }
    Ok(ImageGt {
        id: id.to_string(),
        width,
        height,
        objects,
    })
}
