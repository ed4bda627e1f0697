//! Line-delimited cohort export.
//!
//! ```text
//! # confed-cohort v1
//! # vocab <diag> <med> <lab>
//! # diseases <name> <name> ...
//! <person_id>\t<region>\t<diag>\t<med>\t<lab>\t<labels>
//! ```
//!
//! `person_id` is 16 hex digits. Each code list is comma-separated ascending
//! indices; an empty field is a present-but-empty vector and `-` marks an
//! absent data type. `labels` is one `0`/`1` character per disease.

use std::io::{BufRead, Write};

use super::{CodeVector, CohortError, DataType, PersonId, PersonRecord, TypeTriple};

const MAGIC_LINE: &str = "# confed-cohort v1";

pub fn write_cohort<W: Write>(
    mut w: W,
    records: &[PersonRecord],
    vocab_sizes: &TypeTriple<usize>,
    disease_names: &[String],
) -> Result<(), CohortError> {
    let io = |e: std::io::Error| CohortError::Io(e.to_string());
    writeln!(w, "{MAGIC_LINE}").map_err(io)?;
    writeln!(w, "# vocab {} {} {}", vocab_sizes.diag, vocab_sizes.med, vocab_sizes.lab).map_err(io)?;
    writeln!(w, "# diseases {}", disease_names.join(" ")).map_err(io)?;
    let mut line = String::new();
    for r in records {
        line.clear();
        line.push_str(&format!("{}\t{}", r.person_id, r.region));
        for t in DataType::ALL {
            line.push('\t');
            match &r.x[t] {
                None => line.push('-'),
                Some(v) => {
                    let codes: Vec<String> = v.indices().iter().map(u32::to_string).collect();
                    line.push_str(&codes.join(","));
                }
            }
        }
        line.push('\t');
        line.extend(r.labels.iter().map(|&l| if l { '1' } else { '0' }));
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Records, vocabulary sizes and disease names.
pub type CohortFile = (Vec<PersonRecord>, TypeTriple<usize>, Vec<String>);

pub fn read_cohort<R: BufRead>(r: R) -> Result<CohortFile, CohortError> {
    let mut lines = r.lines().enumerate();
    let mut next_header = |expect: &str| -> Result<String, CohortError> {
        let (i, line) = lines.next().ok_or(CohortError::Format {
            line: 0,
            msg: format!("missing header '{expect}'"),
        })?;
        let line = line.map_err(|e| CohortError::Io(e.to_string()))?;
        if !line.starts_with(expect) {
            return Err(CohortError::Format {
                line: i + 1,
                msg: format!("expected '{expect}'"),
            });
        }
        Ok(line[expect.len()..].trim().to_owned())
    };
    next_header(MAGIC_LINE)?;
    let vocab_line = next_header("# vocab")?;
    let vocab: Vec<usize> = vocab_line
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| CohortError::Format {
            line: 2,
            msg: "bad vocab header".into(),
        })?;
    if vocab.len() != 3 {
        return Err(CohortError::Format {
            line: 2,
            msg: "vocab header needs three sizes".into(),
        });
    }
    let vocab = TypeTriple::new(vocab[0], vocab[1], vocab[2]);
    let names: Vec<String> = next_header("# diseases")?.split_whitespace().map(str::to_owned).collect();

    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| CohortError::Io(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| CohortError::Format {
            line: line_no,
            msg: msg.to_owned(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err("expected 6 tab-separated fields"));
        }
        let person_id = u64::from_str_radix(fields[0], 16).map_err(|_| err("bad person_id"))?;
        let region = fields[1].parse().map_err(|_| err("bad region"))?;
        let mut x = TypeTriple::<Option<CodeVector>>::default();
        for t in DataType::ALL {
            let f = fields[2 + t.index()];
            x[t] = match f {
                "-" => None,
                "" => Some(CodeVector::empty(vocab[t] as u32)),
                list => {
                    let idx = list
                        .split(',')
                        .map(str::parse)
                        .collect::<Result<Vec<u32>, _>>()
                        .map_err(|_| err("bad code list"))?;
                    Some(CodeVector::new(vocab[t] as u32, idx).map_err(|e| err(&e.to_string()))?)
                }
            };
        }
        let labels = fields[5]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(err("labels must be 0/1")),
            })
            .collect::<Result<Vec<bool>, _>>()?;
        if labels.len() != names.len() {
            return Err(err("label count does not match disease header"));
        }
        records.push(PersonRecord {
            person_id: PersonId(person_id),
            region,
            x,
            labels,
        });
    }
    Ok((records, vocab, names))
}
