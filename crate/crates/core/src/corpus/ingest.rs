use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;

use super::{Catalog, Interaction, InteractionStream, Item};
use crate::{Error, Result};

fn parse_lines<T: DeserializeOwned>(
    reader: impl BufRead,
    label: &str,
    mut sink: impl FnMut(usize, T) -> Result<()>,
) -> Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(label, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: label.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        sink(line_no, record)?;
    }
    Ok(())
}

/// Parses a catalog, one item per line. `label` names the source in errors.
pub fn read_catalog(reader: impl BufRead, label: &str) -> Result<Catalog> {
    let mut items: Vec<Item> = Vec::new();
    parse_lines(reader, label, |line, item: Item| {
        if item.categories.is_empty() {
            return Err(Error::Parse {
                path: label.to_owned(),
                line,
                message: format!("item `{}` has an empty category list", item.item_id),
            });
        }
        items.push(item);
        Ok(())
    })?;
    Catalog::new(items)
}

/// Parses interactions and checks each against `catalog`.
pub fn read_interactions(
    reader: impl BufRead,
    label: &str,
    catalog: &Catalog,
) -> Result<InteractionStream> {
    let mut out = Vec::new();
    parse_lines(reader, label, |line, it: Interaction| {
        if catalog.get(it.item_id.as_str()).is_none() {
            return Err(Error::DanglingItem {
                path: label.to_owned(),
                line,
                item_id: it.item_id.0,
            });
        }
        out.push(it);
        Ok(())
    })?;
    Ok(InteractionStream::from_interactions(out))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Loads a catalog and the interaction stream that references it.
pub fn ingest_interactions(
    catalog_path: impl AsRef<Path>,
    interactions_path: impl AsRef<Path>,
) -> Result<(Catalog, InteractionStream)> {
    let catalog_path = catalog_path.as_ref();
    let interactions_path = interactions_path.as_ref();
    let catalog = read_catalog(open(catalog_path)?, &catalog_path.display().to_string())?;
    let stream = read_interactions(
        open(interactions_path)?,
        &interactions_path.display().to_string(),
        &catalog,
    )?;
    Ok((catalog, stream))
}

pub fn write_catalog(mut w: impl Write, catalog: &Catalog) -> Result<()> {
    for item in catalog.items() {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io("<catalog>", e))?;
    }
    Ok(())
}

pub fn write_interactions(mut w: impl Write, stream: &InteractionStream) -> Result<()> {
    for it in stream.iter() {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io("<interactions>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const CATALOG: &str = r#"{"item_id":"A","title":"Alpha","categories":["Games"],"price":10.0,"store":"X"}
{"item_id":"B","title":"Beta","categories":["Games","Nintendo"]}
{"item_id":"C","title":"Gamma","categories":["Office"],"avg_rating":4.5,"review_count":12}
"#;

    #[test]
    fn streams_are_grouped_and_time_sorted() {
        let catalog = read_catalog(Cursor::new(CATALOG), "catalog").unwrap();
        let interactions = r#"{"user_id":"u1","item_id":"B","timestamp":30}
{"user_id":"u2","item_id":"A","timestamp":5}
{"user_id":"u1","item_id":"A","timestamp":10,"rating":5.0}
{"user_id":"u2","item_id":"C","timestamp":1}

{"user_id":"u1","item_id":"C","timestamp":20,"verified":true}
"#;
        let stream = read_interactions(Cursor::new(interactions), "inter", &catalog).unwrap();
        assert_eq!(stream.user("u1").len(), 3);
        assert_eq!(stream.user("u2").len(), 2);
        let ts: Vec<i64> = stream.user("u1").iter().map(|i| i.timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
        assert_eq!(stream.user("u2")[0].item_id.as_str(), "C");
        // unknown fields survive
        assert_eq!(stream.user("u1")[1].extra["verified"], true);
        assert_eq!(catalog.get("A").unwrap().extra["store"], "X");
    }

    #[test]
    fn dangling_reference_names_the_item() {
        let catalog = read_catalog(Cursor::new(CATALOG), "catalog").unwrap();
        let err = read_interactions(
            Cursor::new("{\"user_id\":\"u\",\"item_id\":\"X9\",\"timestamp\":1}\n"),
            "inter",
            &catalog,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DanglingItem { ref item_id, line: 1, .. } if item_id == "X9"));
        assert!(err.to_string().contains("X9"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = read_catalog(
            Cursor::new("{\"item_id\":\"A\",\"title\":\"a\",\"categories\":[\"x\"]}\n{not json\n"),
            "cat.jsonl",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        // missing required field
        let err = read_catalog(Cursor::new("{\"item_id\":\"A\"}\n"), "cat.jsonl").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn interaction_count_is_conserved() {
        let catalog = read_catalog(Cursor::new(CATALOG), "catalog").unwrap();
        let ids = ["A", "B", "C"];
        let mut text = String::new();
        for i in 0..10_000 {
            text.push_str(&format!(
                "{{\"user_id\":\"u{}\",\"item_id\":\"{}\",\"timestamp\":{}}}\n",
                i % 97,
                ids[i % 3],
                (i * 7919) % 1000
            ));
        }
        let stream = read_interactions(Cursor::new(text), "inter", &catalog).unwrap();
        assert_eq!(stream.len(), 10_000);
    }

    #[test]
    fn write_then_read_preserves_records() {
        let catalog = read_catalog(Cursor::new(CATALOG), "catalog").unwrap();
        let mut buf = Vec::new();
        write_catalog(&mut buf, &catalog).unwrap();
        let again = read_catalog(Cursor::new(buf), "again").unwrap();
        assert_eq!(again.items(), catalog.items());
    }
}
