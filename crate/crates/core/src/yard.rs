//! Yard grid, stations and layout files.
//!
//! A layout is a rectangular grid of 10 m cells. Stations are abstract berth
//! pools: berth characters only count capacity, and the single lowercase gate
//! cell per kind is where vehicles leave and re-enter the road network.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Edge length of one grid cell in meters.
pub const CELL_SIZE_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationKind {
    Charging,
    Inspection,
    Cleaning,
    Loading,
    Parking,
}

impl StationKind {
    /// All five kinds in the fixed tie-break order.
    pub const ALL: [StationKind; 5] = [
        StationKind::Charging,
        StationKind::Inspection,
        StationKind::Cleaning,
        StationKind::Loading,
        StationKind::Parking,
    ];

    /// The required circuit. Parking is not part of it.
    pub const CIRCUIT: [StationKind; 4] = [
        StationKind::Charging,
        StationKind::Inspection,
        StationKind::Cleaning,
        StationKind::Loading,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_circuit(self) -> bool {
        self != StationKind::Parking
    }

    pub fn berth_char(self) -> char {
        match self {
            StationKind::Charging => 'C',
            StationKind::Inspection => 'I',
            StationKind::Cleaning => 'W',
            StationKind::Loading => 'L',
            StationKind::Parking => 'P',
        }
    }

    pub fn gate_char(self) -> char {
        self.berth_char().to_ascii_lowercase()
    }

    fn from_berth_char(c: char) -> Option<Self> {
        StationKind::ALL.into_iter().find(|k| k.berth_char() == c)
    }

    fn from_gate_char(c: char) -> Option<Self> {
        StationKind::ALL.into_iter().find(|k| k.gate_char() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            StationKind::Charging => "charging",
            StationKind::Inspection => "inspection",
            StationKind::Cleaning => "cleaning",
            StationKind::Loading => "loading",
            StationKind::Parking => "parking",
        }
    }
}

impl fmt::Display for StationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StationKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown station kind `{s}`"))
    }
}

/// Grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u16,
    pub col: u16,
}

impl Cell {
    pub const fn new(row: u16, col: u16) -> Self {
        Cell { row, col }
    }

    /// Dense key used by the reservation table.
    pub fn key(self) -> u32 {
        ((self.row as u32) << 16) | self.col as u32
    }

    pub fn is_adjacent(self, other: Cell) -> bool {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col) == 1
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Road,
    Blocked,
    Berth(StationKind),
    Gate(StationKind),
    Entrance,
    Exit,
}

impl Tile {
    pub fn is_traversable(self) -> bool {
        matches!(self, Tile::Road | Tile::Gate(_) | Tile::Entrance | Tile::Exit)
    }

    fn to_char(self) -> char {
        match self {
            Tile::Road => '.',
            Tile::Blocked => '#',
            Tile::Berth(k) => k.berth_char(),
            Tile::Gate(k) => k.gate_char(),
            Tile::Entrance => 'E',
            Tile::Exit => 'X',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Station {
    pub kind: StationKind,
    pub gate: Cell,
    pub berth_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YardLayout {
    pub width: usize,
    pub height: usize,
    pub cell_size_m: f64,
    pub tiles: Vec<Tile>,
    /// Indexed by [`StationKind::index`].
    pub stations: Vec<Station>,
    pub entrance: Cell,
    pub exit: Cell,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("layout has no grid rows")]
    Empty,
    #[error("line {line}: row width {found} differs from {expected}")]
    RaggedRow { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {col}: unknown character `{ch}`")]
    UnknownChar { line: usize, col: usize, ch: char },
    #[error("layout has no entrance `E`")]
    MissingEntrance,
    #[error("layout has more than one entrance `E`")]
    DuplicateEntrance,
    #[error("layout has no exit `X`")]
    MissingExit,
    #[error("layout has more than one exit `X`")]
    DuplicateExit,
    #[error("no gate for {0}")]
    MissingGate(StationKind),
    #[error("more than one gate for {0}")]
    DuplicateGate(StationKind),
    #[error("{0} has zero berths")]
    ZeroBerths(StationKind),
    #[error("grid too large ({0} cells per side max)")]
    TooLarge(usize),
    #[error("layout is invalid: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("entrance {0} is not traversable")]
    EntranceBlocked(Cell),
    #[error("exit {0} is not traversable")]
    ExitBlocked(Cell),
    #[error("{kind} gate {cell} is not traversable")]
    GateBlocked { kind: StationKind, cell: Cell },
    #[error("{0} has zero berths")]
    ZeroBerths(StationKind),
    #[error("{kind} gate {cell} is not reachable from the entrance")]
    GateUnreachable { kind: StationKind, cell: Cell },
    #[error("exit is not reachable from the {kind} gate {cell}")]
    ExitUnreachable { kind: StationKind, cell: Cell },
    #[error("station list is malformed (expected one entry per kind in kind order)")]
    StationList,
    #[error("cell {0} lies outside the grid")]
    OutOfBounds(Cell),
}

const MAX_SIDE: usize = u16::MAX as usize;

impl YardLayout {
    pub fn in_bounds(&self, cell: Cell) -> bool {
        (cell.row as usize) < self.height && (cell.col as usize) < self.width
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.row as usize * self.width + cell.col as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index / self.width) as u16, (index % self.width) as u16)
    }

    pub fn tile(&self, cell: Cell) -> Tile {
        if self.in_bounds(cell) {
            self.tiles[self.index(cell)]
        } else {
            Tile::Blocked
        }
    }

    pub fn is_traversable(&self, cell: Cell) -> bool {
        self.tile(cell).is_traversable()
    }

    /// Cells where a vehicle leaves the road network: station gates and the exit.
    pub fn is_sink(&self, cell: Cell) -> bool {
        cell == self.exit || self.stations.iter().any(|s| s.gate == cell)
    }

    pub fn station(&self, kind: StationKind) -> &Station {
        &self.stations[kind.index()]
    }

    pub fn gate(&self, kind: StationKind) -> Cell {
        self.station(kind).gate
    }

    pub fn capacity(&self, kind: StationKind) -> u32 {
        self.station(kind).berth_count
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    /// Traversable 4-neighbours in N, S, W, E order.
    pub fn neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (r, c) = (cell.row as i32, cell.col as i32);
        [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            .into_iter()
            .filter(|&(r, c)| r >= 0 && c >= 0)
            .map(|(r, c)| Cell::new(r as u16, c as u16))
            .filter(move |&n| self.is_traversable(n))
    }

    pub fn traversable_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.cell_count())
            .map(|i| self.cell_at(i))
            .filter(|&c| self.is_traversable(c))
    }
}

/// Parse the text layout format.
///
/// Lines starting with `;` are comments. Blank lines are ignored.
pub fn parse_layout(text: &str) -> Result<YardLayout, LayoutError> {
    let rows: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.starts_with(';') && !l.trim().is_empty())
        .collect();
    if rows.is_empty() {
        return Err(LayoutError::Empty);
    }
    let width = rows[0].1.chars().count();
    if width > MAX_SIDE || rows.len() > MAX_SIDE {
        return Err(LayoutError::TooLarge(MAX_SIDE));
    }

    let mut tiles = Vec::with_capacity(width * rows.len());
    let mut entrance = None;
    let mut exit = None;
    let mut gates: [Option<Cell>; 5] = [None; 5];
    let mut berths = [0u32; 5];

    for (r, &(line, row)) in rows.iter().enumerate() {
        let found = row.chars().count();
        if found != width {
            return Err(LayoutError::RaggedRow { line, expected: width, found });
        }
        for (c, ch) in row.chars().enumerate() {
            let cell = Cell::new(r as u16, c as u16);
            let tile = match ch {
                '.' => Tile::Road,
                '#' => Tile::Blocked,
                'E' => {
                    if entrance.replace(cell).is_some() {
                        return Err(LayoutError::DuplicateEntrance);
                    }
                    Tile::Entrance
                }
                'X' => {
                    if exit.replace(cell).is_some() {
                        return Err(LayoutError::DuplicateExit);
                    }
                    Tile::Exit
                }
                _ => {
                    if let Some(kind) = StationKind::from_berth_char(ch) {
                        berths[kind.index()] += 1;
                        Tile::Berth(kind)
                    } else if let Some(kind) = StationKind::from_gate_char(ch) {
                        if gates[kind.index()].replace(cell).is_some() {
                            return Err(LayoutError::DuplicateGate(kind));
                        }
                        Tile::Gate(kind)
                    } else {
                        return Err(LayoutError::UnknownChar { line, col: c + 1, ch });
                    }
                }
            };
            tiles.push(tile);
        }
    }

    let entrance = entrance.ok_or(LayoutError::MissingEntrance)?;
    let exit = exit.ok_or(LayoutError::MissingExit)?;
    let mut stations = Vec::with_capacity(5);
    for kind in StationKind::ALL {
        let gate = gates[kind.index()].ok_or(LayoutError::MissingGate(kind))?;
        if berths[kind.index()] == 0 {
            return Err(LayoutError::ZeroBerths(kind));
        }
        stations.push(Station { kind, gate, berth_count: berths[kind.index()] });
    }

    let layout = YardLayout {
        width,
        height: rows.len(),
        cell_size_m: CELL_SIZE_M,
        tiles,
        stations,
        entrance,
        exit,
    };
    let violations = validate_layout(&layout);
    if violations.is_empty() {
        Ok(layout)
    } else {
        Err(LayoutError::Invalid(violations))
    }
}

/// Render a layout back into the text format (without comments).
pub fn serialize_layout(layout: &YardLayout) -> String {
    let mut out = String::with_capacity((layout.width + 1) * layout.height);
    for r in 0..layout.height {
        for c in 0..layout.width {
            out.push(layout.tiles[r * layout.width + c].to_char());
        }
        out.push('\n');
    }
    out
}

/// Check every structural invariant. An empty list means the layout is usable.
pub fn validate_layout(layout: &YardLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let ok_list = layout.stations.len() == 5
        && layout.stations.iter().zip(StationKind::ALL).all(|(s, k)| s.kind == k);
    if !ok_list {
        out.push(Violation::StationList);
        return out;
    }
    for cell in [layout.entrance, layout.exit]
        .into_iter()
        .chain(layout.stations.iter().map(|s| s.gate))
    {
        if !layout.in_bounds(cell) {
            out.push(Violation::OutOfBounds(cell));
        }
    }
    if !out.is_empty() {
        return out;
    }

    let entrance_ok = layout.is_traversable(layout.entrance);
    if !entrance_ok {
        out.push(Violation::EntranceBlocked(layout.entrance));
    }
    let exit_ok = layout.is_traversable(layout.exit);
    if !exit_ok {
        out.push(Violation::ExitBlocked(layout.exit));
    }
    for s in &layout.stations {
        if !layout.is_traversable(s.gate) {
            out.push(Violation::GateBlocked { kind: s.kind, cell: s.gate });
        }
        if s.berth_count == 0 {
            out.push(Violation::ZeroBerths(s.kind));
        }
    }

    // The grid is undirected, so one flood fill from the entrance and one from
    // the exit answer both reachability questions.
    let from_entrance = entrance_ok.then(|| DistanceField::from_source(layout, layout.entrance));
    let from_exit = exit_ok.then(|| DistanceField::from_source(layout, layout.exit));
    for s in &layout.stations {
        if !layout.is_traversable(s.gate) {
            continue;
        }
        if let Some(f) = &from_entrance {
            if f.get(layout, s.gate).is_none() {
                out.push(Violation::GateUnreachable { kind: s.kind, cell: s.gate });
            }
        }
        if let Some(f) = &from_exit {
            if f.get(layout, s.gate).is_none() {
                out.push(Violation::ExitUnreachable { kind: s.kind, cell: s.gate });
            }
        }
    }
    out
}

/// Unweighted BFS distances from one source over traversable cells.
#[derive(Debug, Clone)]
pub struct DistanceField {
    source: Cell,
    dist: Vec<u32>,
}

impl DistanceField {
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn from_source(layout: &YardLayout, source: Cell) -> Self {
        let mut dist = vec![Self::UNREACHABLE; layout.cell_count()];
        if layout.is_traversable(source) {
            let mut queue = VecDeque::new();
            dist[layout.index(source)] = 0;
            queue.push_back(source);
            while let Some(cell) = queue.pop_front() {
                let d = dist[layout.index(cell)] + 1;
                for n in layout.neighbors(cell) {
                    let slot = &mut dist[layout.index(n)];
                    if *slot == Self::UNREACHABLE {
                        *slot = d;
                        queue.push_back(n);
                    }
                }
            }
        }
        DistanceField { source, dist }
    }

    pub fn source(&self) -> Cell {
        self.source
    }

    pub fn get(&self, layout: &YardLayout, cell: Cell) -> Option<u32> {
        if !layout.in_bounds(cell) {
            return None;
        }
        match self.dist[layout.index(cell)] {
            Self::UNREACHABLE => None,
            d => Some(d),
        }
    }

    /// Raw distance by dense index; `UNREACHABLE` when cut off.
    pub fn raw(&self, index: usize) -> u32 {
        self.dist[index]
    }
}

/// Shortest 4-connected path length ignoring time and other vehicles.
/// `None` means unreachable.
pub fn grid_distance(layout: &YardLayout, from: Cell, to: Cell) -> Option<u32> {
    if from == to {
        return layout.is_traversable(from).then_some(0);
    }
    DistanceField::from_source(layout, from).get(layout, to)
}

/// Precomputed distance fields from every gate and the exit.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    gates: Vec<DistanceField>,
    exit: DistanceField,
}

impl DistanceTable {
    pub fn new(layout: &YardLayout) -> Self {
        DistanceTable {
            gates: StationKind::ALL
                .iter()
                .map(|&k| DistanceField::from_source(layout, layout.gate(k)))
                .collect(),
            exit: DistanceField::from_source(layout, layout.exit),
        }
    }

    pub fn to_gate(&self, kind: StationKind) -> &DistanceField {
        &self.gates[kind.index()]
    }

    pub fn to_exit(&self) -> &DistanceField {
        &self.exit
    }

    /// Field whose source is `goal`, if `goal` is a gate or the exit.
    pub fn field_for(&self, goal: Cell) -> Option<&DistanceField> {
        if self.exit.source == goal {
            return Some(&self.exit);
        }
        self.gates.iter().find(|f| f.source == goal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YardSize {
    Small,
    Medium,
    Large,
}

impl YardSize {
    pub const ALL: [YardSize; 3] = [YardSize::Small, YardSize::Medium, YardSize::Large];

    pub fn name(self) -> &'static str {
        match self {
            YardSize::Small => "small",
            YardSize::Medium => "medium",
            YardSize::Large => "large",
        }
    }

    /// Low, medium and high demand (vehicles per 5 h window).
    pub fn demand_levels(self) -> [u32; 3] {
        match self {
            YardSize::Small => [60, 80, 100],
            YardSize::Medium => [80, 160, 225],
            YardSize::Large => [160, 225, 340],
        }
    }

    /// Berth counts in kind order.
    pub fn capacities(self) -> [u32; 5] {
        match self {
            YardSize::Small => [14, 10, 10, 16, 30],
            YardSize::Medium => [28, 20, 20, 30, 60],
            YardSize::Large => [42, 40, 40, 68, 90],
        }
    }

    fn source(self) -> &'static str {
        match self {
            YardSize::Small => include_str!("../layouts/small.map"),
            YardSize::Medium => include_str!("../layouts/medium.map"),
            YardSize::Large => include_str!("../layouts/large.map"),
        }
    }
}

impl fmt::Display for YardSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for YardSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        YardSize::ALL
            .into_iter()
            .find(|y| y.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown yard size `{s}`"))
    }
}

/// One of the shipped layouts.
pub fn builtin_layout(size: YardSize) -> YardLayout {
    parse_layout(size.source()).expect("shipped layouts are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
CIWLP
.ciwl
E...p
X....
";

    fn open_grid(width: usize, height: usize) -> YardLayout {
        YardLayout {
            width,
            height,
            cell_size_m: CELL_SIZE_M,
            tiles: vec![Tile::Road; width * height],
            stations: StationKind::ALL
                .iter()
                .map(|&kind| Station { kind, gate: Cell::new(0, 0), berth_count: 1 })
                .collect(),
            entrance: Cell::new(0, 0),
            exit: Cell::new(0, 0),
        }
    }

    #[test]
    fn minimal_map_counts_one_berth_per_kind() {
        let layout = parse_layout(MINIMAL).unwrap();
        for kind in StationKind::ALL {
            assert_eq!(layout.capacity(kind), 1, "{kind}");
        }
        assert_eq!(layout.entrance, Cell::new(2, 0));
        assert_eq!(layout.exit, Cell::new(3, 0));
    }

    #[test]
    fn builtin_capacities_match_table() {
        for size in YardSize::ALL {
            let layout = builtin_layout(size);
            let caps: Vec<u32> = StationKind::ALL.iter().map(|&k| layout.capacity(k)).collect();
            assert_eq!(caps, size.capacities(), "{size}");
            assert!(validate_layout(&layout).is_empty());
        }
        let small = builtin_layout(YardSize::Small);
        assert_eq!(small.capacity(StationKind::Charging), 14);
        assert_eq!(small.capacity(StationKind::Cleaning), 10);
        assert_eq!(small.capacity(StationKind::Inspection), 10);
        assert_eq!(small.capacity(StationKind::Loading), 16);
        assert_eq!(small.capacity(StationKind::Parking), 30);
        assert_eq!(builtin_layout(YardSize::Large).capacity(StationKind::Loading), 68);
    }

    #[test]
    fn walled_off_loading_gate_is_a_reachability_error() {
        let text = "\
CIWLP#
.ciw#l
E..p#.
X...##
";
        match parse_layout(text) {
            Err(LayoutError::Invalid(v)) => assert!(v.iter().any(|v| matches!(
                v,
                Violation::GateUnreachable { kind: StationKind::Loading, .. }
            ))),
            other => panic!("expected reachability error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_layout("; nothing\n"), Err(LayoutError::Empty));
        assert!(matches!(
            parse_layout("CIWLP\n.ciwl\nE..?p\nX....\n"),
            Err(LayoutError::UnknownChar { ch: '?', line: 3, col: 4 })
        ));
        assert_eq!(
            parse_layout("CIWLP\n.ciwl\n...Xp\nX....\n"),
            Err(LayoutError::DuplicateExit)
        );
        assert_eq!(parse_layout("CIWLP\n.ciwl\n....p\nX....\n"), Err(LayoutError::MissingEntrance));
        assert_eq!(parse_layout("CIW.P\n.ciwl\nE...p\nX....\n"), Err(LayoutError::ZeroBerths(StationKind::Loading)));
        assert_eq!(parse_layout("CIWLP\n.ciwl\nE..lp\nX....\n"), Err(LayoutError::DuplicateGate(StationKind::Loading)));
        assert!(matches!(parse_layout("CIWLP\n.ciwl\nE...p\nX...\n"), Err(LayoutError::RaggedRow { line: 4, .. })));
    }

    #[test]
    fn validate_flags_blocked_gate_and_zero_berths() {
        let mut layout = builtin_layout(YardSize::Medium);
        assert!(validate_layout(&layout).is_empty());

        let blocked = Cell::new(0, 0);
        assert_eq!(layout.tile(blocked), Tile::Blocked);
        layout.stations[StationKind::Cleaning.index()].gate = blocked;
        let v = validate_layout(&layout);
        assert_eq!(v, vec![Violation::GateBlocked { kind: StationKind::Cleaning, cell: blocked }]);

        let mut layout = builtin_layout(YardSize::Medium);
        layout.stations[StationKind::Charging.index()].berth_count = 0;
        assert_eq!(validate_layout(&layout), vec![Violation::ZeroBerths(StationKind::Charging)]);
    }

    #[test]
    fn grid_distance_cases() {
        let layout = open_grid(3, 3);
        let a = Cell::new(0, 0);
        let b = Cell::new(2, 2);
        assert_eq!(grid_distance(&layout, a, a), Some(0));
        assert_eq!(grid_distance(&layout, a, b), Some(4));

        let mut holed = layout.clone();
        holed.tiles[4] = Tile::Blocked;
        assert_eq!(grid_distance(&holed, a, b), Some(4));

        // cut the grid in two with a wall down the middle column
        let mut cut = layout.clone();
        for r in 0..3 {
            cut.tiles[r * 3 + 1] = Tile::Blocked;
        }
        assert_eq!(grid_distance(&cut, a, b), None);
        assert_eq!(grid_distance(&cut, a, Cell::new(2, 0)), Some(2));
    }

    #[test]
    fn serialize_round_trips_builtins() {
        for size in YardSize::ALL {
            let layout = builtin_layout(size);
            assert_eq!(parse_layout(&serialize_layout(&layout)).unwrap(), layout);
        }
    }
}
