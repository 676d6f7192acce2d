//! Bus/branch network model, MATPOWER case parsing and the edge-indexed
//! admittance structure used by the fixed-point model.

use std::collections::{HashMap, VecDeque};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

/// Aggregated in-service generation attached to a bus (p.u.).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub p: f64,
    pub q: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Voltage set point of the first in-service unit.
    pub v_set: f64,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    /// Demand p_d + j q_d (p.u.).
    pub demand: Complex64,
    /// Shunt admittance g + j b (p.u.).
    pub shunt: Complex64,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage magnitude and angle (rad) stored in the case file.
    pub v_init: f64,
    pub theta_init: f64,
    pub generation: Option<Generation>,
}

impl Bus {
    /// Net scheduled injection (generation minus demand).
    pub fn scheduled_injection(&self) -> Complex64 {
        let gen = self
            .generation
            .as_ref()
            .map(|g| Complex64::new(g.p, g.q))
            .unwrap_or_default();
        gen - self.demand
    }

    /// Net active injection limits implied by the generator limits.
    pub fn p_limits(&self) -> Option<(f64, f64)> {
        self.generation
            .as_ref()
            .map(|g| (g.p_min - self.demand.re, g.p_max - self.demand.re))
    }

    /// Net reactive injection limits implied by the generator limits.
    pub fn q_limits(&self) -> Option<(f64, f64)> {
        self.generation
            .as_ref()
            .map(|g| (g.q_min - self.demand.im, g.q_max - self.demand.im))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Bus indices (positions in [`PowerNetwork::buses`]).
    pub from: usize,
    pub to: usize,
    /// Series admittance 1 / (r + jx).
    pub y_series: Complex64,
    /// Total line charging susceptance.
    pub b_charging: f64,
    pub tap: f64,
    /// Phase shift (rad).
    pub shift: f64,
    /// Apparent power rating; `None` when the case leaves it unset.
    pub s_max: Option<f64>,
    pub angle_min: Option<f64>,
    pub angle_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerNetwork {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

impl PowerNetwork {
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn buses_of_kind(&self, kind: BusKind) -> impl Iterator<Item = usize> + '_ {
        self.buses
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.kind == kind)
            .map(|(i, _)| i)
    }

    /// Checks the structural invariants: one slack, valid endpoints, finite
    /// admittances, positive taps and a connected graph.
    pub fn validate(&self) -> Result<()> {
        let n_slack = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if n_slack != 1 {
            return Err(Error::SlackCount(n_slack));
        }
        let n = self.buses.len();
        for (e, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::InvalidNetwork(format!(
                    "branch {e} has an endpoint outside the bus table"
                )));
            }
            if br.from == br.to {
                return Err(Error::InvalidNetwork(format!("branch {e} is a self loop")));
            }
            if !(br.y_series.re.is_finite() && br.y_series.im.is_finite())
                || !br.b_charging.is_finite()
            {
                return Err(Error::InvalidNetwork(format!(
                    "branch {e} has a non-finite admittance"
                )));
            }
            if !(br.tap > 0.0) {
                return Err(Error::InvalidNetwork(format!(
                    "branch {e} has non-positive tap ratio {}",
                    br.tap
                )));
            }
        }
        for b in &self.buses {
            if !(b.shunt.re.is_finite() && b.shunt.im.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "bus {} has a non-finite shunt",
                    b.id
                )));
            }
        }

        let mut adjacency = vec![Vec::new(); n];
        for br in &self.branches {
            adjacency[br.from].push(br.to);
            adjacency[br.to].push(br.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack()]);
        seen[self.slack()] = true;
        while let Some(k) = queue.pop_front() {
            for &l in &adjacency[k] {
                if !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        let unreached = seen.iter().filter(|s| !**s).count();
        if unreached > 0 {
            return Err(Error::Disconnected {
                unreached,
                total: n,
            });
        }
        Ok(())
    }
}

/// Weighted incidence form of the bus admittance relation.
///
/// Every branch `e` contributes exactly one entry to column `e` of `Y^f`
/// (row `from(e)`, multiplying `v_to(e)`) and one entry to column `e` of
/// `Y^t` (row `to(e)`, multiplying `v_from(e)`). All self terms are folded
/// into `y_d`, so that
/// `i_k = y_d[k] v_k + Σ_e Yf[k,e] v_to(e) + Yt[k,e] v_from(e)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAdmittanceStructure {
    pub y_d: Vec<Complex64>,
    pub from: Vec<usize>,
    pub to: Vec<usize>,
    /// `Yf[from(e), e]`.
    pub yf: Vec<Complex64>,
    /// `Yt[to(e), e]`.
    pub yt: Vec<Complex64>,
    /// Self terms of each branch at its from and to terminals.
    pub y_ff: Vec<Complex64>,
    pub y_tt: Vec<Complex64>,
}

impl EdgeAdmittanceStructure {
    pub fn n_edges(&self) -> usize {
        self.from.len()
    }

    /// Entry of the `|V| x |E|` matrix `Y^f`.
    pub fn yf_at(&self, bus: usize, e: usize) -> Complex64 {
        if self.from[e] == bus {
            self.yf[e]
        } else {
            Complex64::default()
        }
    }

    pub fn yt_at(&self, bus: usize, e: usize) -> Complex64 {
        if self.to[e] == bus {
            self.yt[e]
        } else {
            Complex64::default()
        }
    }

    /// Bus admittance matrix assembled from the incidence form, as sorted
    /// sparse rows.
    pub fn bus_admittance(&self) -> Vec<Vec<(usize, Complex64)>> {
        let n = self.y_d.len();
        let mut rows: Vec<HashMap<usize, Complex64>> = vec![HashMap::new(); n];
        for (k, yd) in self.y_d.iter().enumerate() {
            *rows[k].entry(k).or_default() += yd;
        }
        for e in 0..self.n_edges() {
            let (f, t) = (self.from[e], self.to[e]);
            *rows[f].entry(t).or_default() += self.yf[e];
            *rows[t].entry(f).or_default() += self.yt[e];
        }
        rows.into_iter()
            .map(|r| {
                let mut r: Vec<_> = r.into_iter().collect();
                r.sort_by_key(|(j, _)| *j);
                r
            })
            .collect()
    }
}

/// Folds every branch into the incidence-weighted structure. Taps and phase
/// shifts follow the standard pi model: `Yff = (y + j b/2)/|t|^2`,
/// `Yft = -y / conj(t)`, `Ytf = -y / t`, `Ytt = y + j b/2`.
pub fn build_edge_admittances(network: &PowerNetwork) -> EdgeAdmittanceStructure {
    let n = network.n_buses();
    let m = network.n_branches();
    let mut s = EdgeAdmittanceStructure {
        y_d: network.buses.iter().map(|b| b.shunt).collect(),
        from: Vec::with_capacity(m),
        to: Vec::with_capacity(m),
        yf: Vec::with_capacity(m),
        yt: Vec::with_capacity(m),
        y_ff: Vec::with_capacity(m),
        y_tt: Vec::with_capacity(m),
    };
    debug_assert_eq!(s.y_d.len(), n);
    for br in &network.branches {
        let t = Complex64::from_polar(br.tap, br.shift);
        let y = br.y_series;
        let y_tt = y + Complex64::new(0.0, br.b_charging / 2.0);
        let y_ff = y_tt / (br.tap * br.tap);
        s.y_d[br.from] += y_ff;
        s.y_d[br.to] += y_tt;
        s.from.push(br.from);
        s.to.push(br.to);
        s.yf.push(-y / t.conj());
        s.yt.push(-y / t);
        s.y_ff.push(y_ff);
        s.y_tt.push(y_tt);
    }
    s
}

// ---------------------------------------------------------------------------
// MATPOWER text format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Value {
    Number(f64),
    Text,
    Matrix(Vec<Vec<f64>>),
    Cell,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            chars: text.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    fn skip_comment(&mut self) {
        while let Some(c) = self.peek() {
            if c == '\n' {
                break;
            }
            self.bump();
        }
    }

    /// Skips blanks on the current line (not newlines).
    fn skip_inline_space(&mut self) {
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\r' => {
                    self.bump();
                }
                '.' => {
                    // `...` line continuation
                    let rest: String = self.chars.clone().take(3).collect();
                    if rest == "..." {
                        self.skip_comment();
                        self.bump();
                    } else {
                        break;
                    }
                }
                _ => break,
            }
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\r' | '\n' => {
                    self.bump();
                }
                '%' | '#' => self.skip_comment(),
                _ => break,
            }
        }
    }

    fn identifier(&mut self) -> Option<String> {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        (!s.is_empty()).then_some(s)
    }

    fn number(&mut self) -> Result<f64> {
        let (line, column) = (self.line, self.column);
        let mut token = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '+' | '-') {
                // `+`/`-` only at the start or after an exponent marker
                if matches!(c, '+' | '-')
                    && !(token.is_empty() || token.ends_with(['e', 'E']))
                {
                    break;
                }
                token.push(c);
                self.bump();
            } else {
                break;
            }
        }
        let parsed = match token.trim_start_matches('+') {
            "Inf" | "inf" => Some(f64::INFINITY),
            "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
            "NaN" | "nan" => Some(f64::NAN),
            t => t.parse::<f64>().ok(),
        };
        parsed.ok_or_else(|| Error::Syntax {
            line,
            column,
            message: format!("invalid number `{token}`"),
        })
    }

    fn matrix(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::new();
        let mut row = Vec::new();
        loop {
            self.skip_inline_space();
            match self.peek() {
                None => return Err(self.error("unterminated matrix")),
                Some(']') => {
                    self.bump();
                    if !row.is_empty() {
                        rows.push(std::mem::take(&mut row));
                    }
                    return Ok(rows);
                }
                Some(';') | Some('\n') => {
                    self.bump();
                    if !row.is_empty() {
                        rows.push(std::mem::take(&mut row));
                    }
                }
                Some(',') => {
                    self.bump();
                }
                Some('%') | Some('#') => self.skip_comment(),
                Some(c) if c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'I' | 'i' | 'N' | 'n') => {
                    row.push(self.number()?);
                }
                Some(c) => return Err(self.error(format!("unexpected `{c}` in matrix"))),
            }
        }
    }

    fn skip_cell(&mut self) -> Result<()> {
        let mut depth = 1usize;
        while depth > 0 {
            match self.bump() {
                None => return Err(self.error("unterminated cell array")),
                Some('{') => depth += 1,
                Some('}') => depth -= 1,
                Some('\'') => self.quoted_rest()?.map(|_| ()).unwrap_or(()),
                Some('%') => self.skip_comment(),
                _ => {}
            }
        }
        Ok(())
    }

    /// Reads the remainder of a single-quoted string whose opening quote
    /// was already consumed.
    fn quoted_rest(&mut self) -> Result<Option<String>> {
        let mut s = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => return Err(self.error("unterminated string")),
                Some('\'') => {
                    if self.peek() == Some('\'') {
                        self.bump();
                        s.push('\'');
                    } else {
                        return Ok(Some(s));
                    }
                }
                Some(c) => s.push(c),
            }
        }
    }

    fn value(&mut self) -> Result<Value> {
        self.skip_inline_space();
        match self.peek() {
            Some('[') => {
                self.bump();
                Ok(Value::Matrix(self.matrix()?))
            }
            Some('{') => {
                self.bump();
                self.skip_cell()?;
                Ok(Value::Cell)
            }
            Some('\'') => {
                self.bump();
                self.quoted_rest()?;
                Ok(Value::Text)
            }
            Some(_) => Ok(Value::Number(self.number()?)),
            None => Err(self.error("expected a value")),
        }
    }

    fn statements(&mut self) -> Result<HashMap<String, Value>> {
        let mut fields = HashMap::new();
        loop {
            self.skip_space_and_comments();
            if self.peek().is_none() {
                return Ok(fields);
            }
            let head = self
                .identifier()
                .ok_or_else(|| self.error("expected an assignment"))?;
            if head == "function" || head == "end" || head == "return" {
                self.skip_comment();
                continue;
            }
            let mut name = head;
            while self.peek() == Some('.') {
                self.bump();
                let part = self
                    .identifier()
                    .ok_or_else(|| self.error("expected a field name after `.`"))?;
                name = part;
            }
            self.skip_inline_space();
            if self.bump() != Some('=') {
                return Err(self.error(format!("expected `=` after `{name}`")));
            }
            let value = self.value()?;
            self.skip_inline_space();
            match self.peek() {
                Some(';') | Some(',') | Some('\n') => {
                    self.bump();
                }
                Some('%') | Some('#') | None => {}
                Some(c) => return Err(self.error(format!("unexpected `{c}` after value"))),
            }
            fields.insert(name, value);
        }
    }
}

fn table<'a>(fields: &'a HashMap<String, Value>, name: &'static str) -> Result<&'a [Vec<f64>]> {
    match fields.get(name) {
        Some(Value::Matrix(rows)) => Ok(rows),
        _ => Err(Error::MissingTable(name)),
    }
}

fn require_columns(rows: &[Vec<f64>], table: &'static str, n: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() < n {
            return Err(Error::BadRow {
                table,
                row: i + 1,
                message: format!("expected at least {n} columns, found {}", r.len()),
            });
        }
    }
    Ok(())
}

fn bus_id(value: f64, table: &'static str, row: usize) -> Result<u32> {
    if value.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&value) {
        return Err(Error::BadRow {
            table,
            row,
            message: format!("invalid bus number {value}"),
        });
    }
    Ok(value as u32)
}

/// Parses a MATPOWER (version 2) case. Quantities are converted to per unit
/// on the system base, out-of-service elements are dropped and generators
/// sharing a bus are aggregated.
pub fn parse_matpower(text: &str) -> Result<PowerNetwork> {
    let fields = Lexer::new(text).statements()?;

    let base_mva = match fields.get("baseMVA") {
        Some(Value::Number(v)) if *v > 0.0 => *v,
        Some(_) => return Err(Error::InvalidNetwork("baseMVA must be a positive number".into())),
        None => return Err(Error::MissingTable("baseMVA")),
    };
    let bus_rows = table(&fields, "bus")?;
    let gen_rows = table(&fields, "gen")?;
    let branch_rows = table(&fields, "branch")?;
    require_columns(bus_rows, "bus", 13)?;
    require_columns(gen_rows, "gen", 10)?;
    require_columns(branch_rows, "branch", 11)?;

    let name = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("function"))
        .and_then(|l| l.split('=').nth(1))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();

    let mut index: HashMap<u32, usize> = HashMap::new();
    let mut isolated: Vec<u32> = Vec::new();
    let mut buses = Vec::new();
    let mut declared_type = Vec::new();
    for (i, r) in bus_rows.iter().enumerate() {
        let id = bus_id(r[0], "bus", i + 1)?;
        if index.contains_key(&id) || isolated.contains(&id) {
            return Err(Error::DuplicateBus(id));
        }
        let kind_code = r[1] as i64;
        if kind_code == 4 {
            isolated.push(id);
            continue;
        }
        if !(1..=3).contains(&kind_code) {
            return Err(Error::BadRow {
                table: "bus",
                row: i + 1,
                message: format!("unknown bus type {}", r[1]),
            });
        }
        index.insert(id, buses.len());
        declared_type.push(kind_code);
        buses.push(Bus {
            id,
            kind: BusKind::Load,
            demand: Complex64::new(r[2], r[3]) / base_mva,
            shunt: Complex64::new(r[4], r[5]) / base_mva,
            v_min: r[12],
            v_max: r[11],
            v_init: if r[7] > 0.0 { r[7] } else { 1.0 },
            theta_init: r[8].to_radians(),
            generation: None,
        });
    }

    for (i, r) in gen_rows.iter().enumerate() {
        if r[7] <= 0.0 {
            continue;
        }
        let id = bus_id(r[0], "gen", i + 1)?;
        let k = *index.get(&id).ok_or_else(|| Error::UnknownBus {
            element: format!("generator {}", i + 1),
            bus: id,
        })?;
        let g = buses[k].generation.get_or_insert(Generation {
            p: 0.0,
            q: 0.0,
            p_min: 0.0,
            p_max: 0.0,
            q_min: 0.0,
            q_max: 0.0,
            v_set: r[5],
            units: 0,
        });
        g.p += r[1] / base_mva;
        g.q += r[2] / base_mva;
        g.q_max += r[3] / base_mva;
        g.q_min += r[4] / base_mva;
        g.p_max += r[8] / base_mva;
        g.p_min += r[9] / base_mva;
        g.units += 1;
    }

    for (bus, code) in buses.iter_mut().zip(&declared_type) {
        bus.kind = match (code, bus.generation.is_some()) {
            (3, _) => BusKind::Slack,
            (2, true) => BusKind::Generator,
            _ => BusKind::Load,
        };
        if bus.kind != BusKind::Load {
            if let Some(g) = &bus.generation {
                bus.v_init = g.v_set;
            }
        }
    }

    let mut branches = Vec::new();
    for (i, r) in branch_rows.iter().enumerate() {
        if r[10] <= 0.0 {
            continue;
        }
        let endpoint = |v: f64| -> Result<usize> {
            let id = bus_id(v, "branch", i + 1)?;
            index.get(&id).copied().ok_or_else(|| Error::UnknownBus {
                element: format!("branch {}", i + 1),
                bus: id,
            })
        };
        let from = endpoint(r[0])?;
        let to = endpoint(r[1])?;
        let z = Complex64::new(r[2], r[3]);
        if z.norm() == 0.0 {
            return Err(Error::BadRow {
                table: "branch",
                row: i + 1,
                message: "zero series impedance".into(),
            });
        }
        let angle = |v: Option<&f64>, lo: bool| -> Option<f64> {
            let v = *v?;
            let inactive = if lo { v <= -360.0 } else { v >= 360.0 };
            (!inactive && v != 0.0).then(|| v.to_radians())
        };
        branches.push(Branch {
            from,
            to,
            y_series: z.inv(),
            b_charging: r[4],
            tap: if r[8] == 0.0 { 1.0 } else { r[8] },
            shift: r[9].to_radians(),
            s_max: (r[5] > 0.0).then(|| r[5] / base_mva),
            angle_min: angle(r.get(11), true),
            angle_max: angle(r.get(12), false),
        });
    }

    let network = PowerNetwork {
        name,
        base_mva,
        buses,
        branches,
    };
    network.validate()?;
    Ok(network)
}
