//! Per-admission explanations: the significance distribution over the
//! admission's diseases and the transport plan from those diseases to the
//! recommended procedures (uniform weight on each recommendation).

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::attention::fuse;
use crate::data::{Admission, CodeVocabulary};
use crate::error::{Error, Result};
use crate::model::{logits_all, rank_top, ModelParams};
use crate::scalar::{sigmoid, Scalar};
use crate::transport::{cost_matrix, solve_ot, uniform, OtConfig, OtDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub admission_id: String,
    pub disease_codes: Vec<String>,
    /// Significance of each disease, aligned with `disease_codes`.
    pub significance: Vec<f64>,
    /// Top-L procedures, best first.
    pub recommended_codes: Vec<String>,
    pub recommended_scores: Vec<f64>,
    /// `|disease_codes| x |recommended_codes|`, row-major.
    pub transport: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<BTreeMap<String, String>>,
    pub ot: OtDiagnostics,
}

pub fn explain<T: Scalar>(
    params: &ModelParams<T>,
    diseases: &CodeVocabulary,
    procedures: &CodeVocabulary,
    admission: &Admission,
    top: usize,
    descriptions: Option<&HashMap<String, String>>,
    ot: &OtConfig,
) -> Result<Explanation> {
    if top == 0 {
        return Err(Error::InvalidArgument("top-L must be at least 1".into()));
    }
    let rows = params.disease_rows(&admission.diseases)?;
    let mu = fuse(&params.attention, params.fusion, rows.view())?.mu;
    let logits = logits_all(params, &admission.diseases)?;
    let recommended = rank_top(logits.view(), top)?;
    let cols = params.procedure_rows(&recommended)?;
    let costs = cost_matrix(rows.view(), cols.view(), ot.epsilon_guard)?;
    let (plan, diag) = solve_ot(&costs, mu.view(), uniform::<T>(top).view(), ot)?;

    let code = |vocab: &CodeVocabulary, i: usize| -> Result<String> {
        vocab.code(i).map(str::to_string).ok_or(Error::IndexOutOfRange {
            what: "vocabulary",
            index: i,
            size: vocab.len(),
        })
    };
    let disease_codes = admission
        .diseases
        .iter()
        .map(|&d| code(diseases, d))
        .collect::<Result<Vec<_>>>()?;
    let recommended_codes = recommended
        .iter()
        .map(|&p| code(procedures, p))
        .collect::<Result<Vec<_>>>()?;
    let descriptions = descriptions.map(|table| {
        disease_codes
            .iter()
            .chain(&recommended_codes)
            .filter_map(|c| table.get(c).map(|d| (c.clone(), d.clone())))
            .collect()
    });
    Ok(Explanation {
        admission_id: admission.id.clone(),
        disease_codes,
        significance: mu.iter().map(|x| x.as_f64()).collect(),
        recommended_scores: recommended.iter().map(|&p| sigmoid(logits[p]).as_f64()).collect(),
        recommended_codes,
        transport: plan
            .plan
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect(),
        descriptions,
        ot: diag,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Explanation {
    /// Matrix export: header row of procedure codes, one row per disease code.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("disease");
        for p in &self.recommended_codes {
            out.push(',');
            out.push_str(&csv_field(p));
        }
        out.push('\n');
        for (d, row) in self.disease_codes.iter().zip(&self.transport) {
            out.push_str(&csv_field(d));
            for t in row {
                out.push_str(&format!(",{t:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Reads `code<TAB>description` rows. Blank lines are skipped; later
/// duplicates replace earlier ones with a warning.
pub fn load_descriptions<R: BufRead>(input: R) -> Result<HashMap<String, String>> {
    let mut table = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((code, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected code<TAB>description".into(),
            });
        };
        if code.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty code".into(),
            });
        }
        if table.insert(code.to_string(), text.to_string()).is_some() {
            log::warn!("line {}: duplicate description for {code}, keeping the later one", i + 1);
        }
    }
    Ok(table)
}
