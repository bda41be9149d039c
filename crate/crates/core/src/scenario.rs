//! Scenario files: a TOML description of a chart, its geometry and the
//! identity to verify, plus the runner producing a JSON-serializable report.

use crate::berezin::{BerezinDensity, Convention, DiffOp, Kind, ParityRule, SignRule};
use crate::chart::{compose, Chart, CoordSystem, Morphism, Retraction};
use crate::corners::{BoundaryTerm, CornerProblem, CornerStructure, Face};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grassmann::SuperNumber;
use crate::parse::{self, Scope};
use crate::quadrature::{richardson_even, QuadratureRule, Region};
use crate::stokes::{stokes_general, verify_stokes, Boundary, IntegralForm};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use toml::Spanned;

type Text = Spanned<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Corners,
    Stokes,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Corners => "corners",
            Mode::Stokes => "stokes",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub parameters: BTreeMap<String, Text>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convention: Option<ConventionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature: Option<QuadratureSpec>,
    pub chart: ChartSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ChartSpec>,
    /// Model coordinates as superfunctions on the main chart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub morphism: Option<Vec<Text>>,
    #[serde(default)]
    pub coordinates: BTreeMap<String, Vec<Text>>,
    pub retractions: RetractionsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
    #[serde(default)]
    pub boundary: Vec<BoundarySpec>,
    #[serde(default)]
    pub face: Vec<FaceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivations: Option<Vec<Vec<Text>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<FormSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stokes: Option<StokesSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub expect: Vec<ExpectSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConventionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub name: String,
    pub even: Vec<String>,
    #[serde(default)]
    pub odd: Vec<String>,
    pub bounds: Vec<[Text; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Text>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<RegionMapSpec>,
}

/// Parametrization of the region by a reference box.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMapSpec {
    pub vars: Vec<String>,
    pub coords: Vec<Text>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetractionsSpec {
    pub gamma: RetractionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_prime: Option<RetractionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetractionSpec {
    /// `canonical`, `coords` (associated with a coordinate system),
    /// `images` (explicit pullbacks of the base coordinates) or `model`
    /// (pullback of the model's canonical retraction).
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<Text>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    /// `density` (section of `|Ber|`) or `form` (section of `Ber`).
    #[serde(default = "default_kind")]
    pub kind: String,
    /// `main` or `model`.
    #[serde(default = "default_on")]
    pub on: String,
    /// Name of a coordinate system, or `standard`.
    #[serde(default = "default_coords")]
    pub coords: String,
    pub coeff: Text,
    /// Pull the even arguments back through this retraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift: Option<String>,
}

fn default_kind() -> String {
    "density".into()
}

fn default_on() -> String {
    "main".into()
}

fn default_coords() -> String {
    "standard".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub rho: Text,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSpec {
    pub vanish: Vec<usize>,
    #[serde(default)]
    pub vars: Vec<String>,
    #[serde(default)]
    pub bounds: Vec<[Text; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<Vec<bool>>,
    pub param: Vec<Text>,
    #[serde(default)]
    pub complement: Vec<Text>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormSpec {
    #[serde(default = "default_coords")]
    pub coords: String,
    pub components: Vec<Text>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StokesSpec {
    /// Boundary structures to test: `compatible` (induced by `gamma`) or
    /// `naive` (induced by the canonical retraction).
    pub boundaries: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<f64>,
    /// Also integrate the density over the whole model chart.
    #[serde(default)]
    pub reference: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectSpec {
    pub quantity: String,
    pub value: Text,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Compare absolute values only.
    #[serde(default)]
    pub magnitude: bool,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub convention: Option<Convention>,
    pub quad_order: Option<usize>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConventionInfo {
    pub s: String,
    pub b: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadratureInfo {
    pub kind: &'static str,
    pub order: usize,
    pub panels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CornerRun {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<(String, f64)>,
    pub direct: f64,
    pub bulk: f64,
    pub terms: Vec<BoundaryTerm>,
    pub boundary_total: f64,
    pub residual: f64,
    pub base_terms: Vec<BoundaryTerm>,
    pub base_boundary_total: f64,
    pub base_residual: f64,
    pub term_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StokesRun {
    pub boundary: String,
    pub lhs: f64,
    pub boundary_terms: Vec<f64>,
    pub sign_factor: f64,
    pub rhs: f64,
    pub residual: f64,
    pub classical_rhs: f64,
    pub classical_residual: f64,
    pub general_boundary: f64,
    pub transversal: Vec<f64>,
    pub general_rhs: f64,
    pub general_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: String,
    pub mode: Mode,
    pub convention: ConventionInfo,
    pub quadrature: QuadratureInfo,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub corners: Vec<CornerRun>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stokes: Vec<StokesRun>,
    /// Named scalar results referenced by the checks.
    pub quantities: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Largest identity residual.
    pub residual: f64,
    pub passed: bool,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const BUILTINS: &[(&str, &str)] = &[
    ("rudakov", include_str!("../scenarios/rudakov.toml")),
    ("r14-stokes", include_str!("../scenarios/r14-stokes.toml")),
    ("polar", include_str!("../scenarios/polar.toml")),
    ("quadrant-q4", include_str!("../scenarios/quadrant-q4.toml")),
    ("square-q4", include_str!("../scenarios/square-q4.toml")),
];

/// A parsed scenario together with its source text.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    source: String,
}

/// Everything built from the file for one set of parameter values.
struct Built {
    chart: Arc<Chart>,
    model: Option<(Arc<Chart>, Morphism)>,
    gamma: Retraction,
    gamma_prime: Option<Retraction>,
    density: Option<(BerezinDensity, Expr)>,
    /// The density as declared on the model chart.
    model_density: Option<BerezinDensity>,
    corners: Option<CornerStructure>,
    base_derivations: Option<Vec<Vec<Expr>>>,
    form: Option<IntegralForm>,
}

impl Scenario {
    pub fn parse(source: &str) -> Result<Scenario> {
        let file: ScenarioFile = toml::from_str(source).map_err(|e| {
            let (line, col) = e.span().map(|s| line_col(source, s.start)).unwrap_or((0, 0));
            Error::Parse { line, col, msg: e.message().to_string() }
        })?;
        let sc = Scenario { file, source: source.to_string() };
        sc.check_names()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Scenario::parse(&text)
    }

    pub fn builtin(name: &str) -> Result<Scenario> {
        let (_, src) = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Input(format!("unknown example `{name}`")))?;
        Scenario::parse(src)
    }

    /// Names and one-line descriptions of the shipped examples.
    pub fn builtins() -> Vec<(String, String)> {
        BUILTINS
            .iter()
            .map(|(n, src)| {
                let d = Scenario::parse(src).map(|s| s.file.description).unwrap_or_default();
                (n.to_string(), d)
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("scenario serializes")
    }

    fn check_names(&self) -> Result<()> {
        let f = &self.file;
        let known_system = |n: &str| n == "standard" || f.coordinates.contains_key(n);
        let mut systems: Vec<&str> = Vec::new();
        if let Some(d) = &f.density {
            systems.push(&d.coords);
        }
        if let Some(fm) = &f.form {
            systems.push(&fm.coords);
        }
        for r in std::iter::once(&f.retractions.gamma).chain(&f.retractions.gamma_prime) {
            if let Some(c) = &r.coords {
                systems.push(c);
            }
        }
        for s in systems {
            if !known_system(s) {
                return Err(Error::Input(format!("unknown coordinate system `{s}`")));
            }
        }
        for l in f.density.iter().filter_map(|d| d.lift.as_ref()).chain(f.form.iter().filter_map(|d| d.lift.as_ref())) {
            if l != "gamma" && l != "gamma_prime" {
                return Err(Error::Input(format!("unknown retraction `{l}`")));
            }
        }
        if let Some(sw) = &f.sweep {
            if !f.parameters.contains_key(&sw.parameter) {
                return Err(Error::Input(format!("sweep parameter `{}` is not declared", sw.parameter)));
            }
            if sw.values.len() < 2 {
                return Err(Error::Input("a sweep needs at least two values".into()));
            }
        }
        match f.mode {
            Mode::Corners if f.density.is_none() => return Err(Error::Input("corners mode needs [density]".into())),
            Mode::Corners if f.retractions.gamma_prime.is_none() => {
                return Err(Error::Input("corners mode needs retractions.gamma_prime".into()))
            }
            Mode::Stokes if f.form.is_none() || f.stokes.is_none() => {
                return Err(Error::Input("stokes mode needs [form] and [stokes]".into()))
            }
            _ => {}
        }
        if f.boundary.is_empty() || f.face.is_empty() {
            return Err(Error::Input("at least one [[boundary]] and one [[face]] are required".into()));
        }
        Ok(())
    }

    /// Parse error positions are file positions of the expression text.
    fn ast(&self, text: &Text) -> Result<parse::Ast> {
        parse::parse(text.get_ref()).map_err(|e| self.locate(text, e))
    }

    fn locate(&self, text: &Text, e: Error) -> Error {
        match e {
            Error::Parse { col, msg, .. } => {
                let span = text.span();
                let raw = &self.source.get(span.clone()).unwrap_or("");
                let quote = if raw.starts_with("\"\"\"") || raw.starts_with("'''") { 3 } else { 1 };
                let start = span.start + quote;
                let offset: usize = self.source[start..].chars().take(col).map(|c| c.len_utf8()).sum();
                let (line, col) = line_col(&self.source, start + offset);
                Error::Parse { line, col, msg }
            }
            other => other,
        }
    }

    fn number(&self, text: &Text, params: &HashMap<String, f64>) -> Result<f64> {
        let ast = self.ast(text)?;
        parse::eval_number(&ast, &Scope::numeric(params)).map_err(|e| self.locate(text, e))
    }

    fn scalar(&self, text: &Text, scope: &Scope) -> Result<Expr> {
        let ast = self.ast(text)?;
        parse::eval_scalar(&ast, scope).map_err(|e| self.locate(text, e))
    }

    fn superfunction(&self, text: &Text, scope: &Scope) -> Result<SuperNumber> {
        let ast = self.ast(text)?;
        parse::eval_super(&ast, scope).map_err(|e| self.locate(text, e))
    }

    fn params(&self, overrides: &[(String, f64)]) -> Result<HashMap<String, f64>> {
        let mut params = HashMap::new();
        for (name, text) in &self.file.parameters {
            let v = self.number(text, &params)?;
            params.insert(name.clone(), v);
        }
        for (name, v) in overrides {
            params.insert(name.clone(), *v);
        }
        Ok(params)
    }

    fn bounds(&self, bounds: &[[Text; 2]], params: &HashMap<String, f64>) -> Result<Vec<(f64, f64)>> {
        bounds
            .iter()
            .map(|[a, b]| Ok((self.number(a, params)?, self.number(b, params)?)))
            .collect()
    }

    fn chart(&self, spec: &ChartSpec, params: &HashMap<String, f64>) -> Result<Arc<Chart>> {
        let bounds = self.bounds(&spec.bounds, params)?;
        let mut region = match (&spec.mask, &spec.map) {
            (Some(_), Some(_)) => return Err(Error::Input(format!("chart `{}`: mask and map exclude each other", spec.name))),
            (Some(mask), None) => {
                let box_chart = Chart::new(&spec.name, spec.even.clone(), vec![], Region::cuboid(bounds.clone()))?;
                let scope = Scope::on_chart(params, &box_chart, false);
                let m = mask.iter().map(|t| self.scalar(t, &scope)).collect::<Result<_>>()?;
                Region::masked(bounds, m)
            }
            (None, Some(map)) => {
                let ref_chart = Chart::new("reference", map.vars.clone(), vec![], Region::cuboid(bounds.clone()))?;
                let scope = Scope::on_chart(params, &ref_chart, false);
                let coords = map.coords.iter().map(|t| self.scalar(t, &scope)).collect::<Result<_>>()?;
                Region::mapped(map.vars.clone(), bounds, coords)?
            }
            (None, None) => Region::cuboid(bounds),
        };
        if let Some(p) = &spec.periodic {
            region = region.with_periodic(p.clone());
        }
        Chart::new(&spec.name, spec.even.clone(), spec.odd.clone(), region)
            .map_err(|e| e.context(format!("chart `{}`", spec.name)))
    }

    fn retraction(
        &self,
        spec: &RetractionSpec,
        chart: &Arc<Chart>,
        systems: &HashMap<String, CoordSystem>,
        model: &Option<(Arc<Chart>, Morphism)>,
        scope: &Scope,
    ) -> Result<Retraction> {
        match spec.kind.as_str() {
            "canonical" => Ok(Retraction::canonical(chart)),
            "coords" => {
                let name = spec.coords.as_deref().ok_or_else(|| Error::Input("retraction kind `coords` needs `coords`".into()))?;
                Retraction::associated(system(systems, chart, name)?.as_ref())
            }
            "images" => {
                let images = spec.images.as_ref().ok_or_else(|| Error::Input("retraction kind `images` needs `images`".into()))?;
                let imgs = images.iter().map(|t| self.superfunction(t, scope)).collect::<Result<_>>()?;
                Retraction::new(chart, imgs)
            }
            "model" => {
                let (mchart, phi) = model.as_ref().ok_or_else(|| Error::Input("retraction kind `model` needs [model]".into()))?;
                phi.pullback_retraction(&Retraction::canonical(mchart))
            }
            other => Err(Error::Input(format!("unknown retraction kind `{other}`"))),
        }
    }

    fn lifted(&self, f: SuperNumber, lift: &Option<String>, b: &Built) -> Result<SuperNumber> {
        let gamma = match lift.as_deref() {
            None => return Ok(f),
            Some("gamma") => &b.gamma,
            Some(_) => b.gamma_prime.as_ref().ok_or_else(|| Error::Input("gamma_prime is not declared".into()))?,
        };
        let chart = gamma.chart();
        let images: Vec<SuperNumber> =
            gamma.images().iter().cloned().chain(chart.coords()[chart.p()..].iter().cloned()).collect();
        compose(&f, &chart.vars, &images)
    }

    fn build(&self, params: &HashMap<String, f64>) -> Result<Built> {
        let f = &self.file;
        let chart = self.chart(&f.chart, params)?;
        let scope = Scope::on_chart(params, &chart, true);
        let base_scope = Scope::on_chart(params, &chart, false);

        let model = match &f.model {
            None => None,
            Some(m) => {
                let mchart = self.chart(m, params)?;
                let morphism = f.morphism.as_ref().ok_or_else(|| Error::Input("[model] needs a morphism".into()))?;
                let images = morphism.iter().map(|t| self.superfunction(t, &scope)).collect::<Result<_>>()?;
                let phi = Morphism::new(&chart, &mchart, images).map_err(|e| e.context("model morphism"))?;
                Some((mchart, phi))
            }
        };

        let mut systems = HashMap::new();
        for (name, comps) in &f.coordinates {
            let c = comps.iter().map(|t| self.superfunction(t, &scope)).collect::<Result<_>>()?;
            let sys = CoordSystem::new(&chart, c).map_err(|e| e.context(format!("coordinate system `{name}`")))?;
            systems.insert(name.clone(), sys);
        }

        let gamma = self
            .retraction(&f.retractions.gamma, &chart, &systems, &model, &scope)
            .map_err(|e| e.context("retraction gamma"))?;
        let gamma_prime = match &f.retractions.gamma_prime {
            None => None,
            Some(spec) => Some(
                self.retraction(spec, &chart, &systems, &model, &scope)
                    .map_err(|e| e.context("retraction gamma_prime"))?,
            ),
        };

        let rho: Vec<Expr> = f.boundary.iter().map(|b| self.scalar(&b.rho, &base_scope)).collect::<Result<_>>()?;
        let mut faces = Vec::new();
        for (k, fs) in f.face.iter().enumerate() {
            let bounds = self.bounds(&fs.bounds, params)?;
            let region = if fs.vars.is_empty() {
                Region::point()
            } else {
                let r = Region::cuboid(bounds);
                match &fs.periodic {
                    Some(p) => r.with_periodic(p.clone()),
                    None => r,
                }
            };
            let face_chart = Chart::new(&format!("{}_face{k}", chart.name), fs.vars.clone(), chart.odd.clone(), region)?;
            let face_scope = Scope::on_chart(params, &face_chart, false);
            let param = fs.param.iter().map(|t| self.scalar(t, &face_scope)).collect::<Result<_>>()?;
            let complement = fs.complement.iter().map(|t| self.scalar(t, &base_scope)).collect::<Result<_>>()?;
            faces.push(Face { vanish: fs.vanish.clone(), chart: face_chart.clone(), param, complement });
        }
        let corners = Some(CornerStructure::new(&chart, rho, faces).map_err(|e| e.context("corner structure"))?);

        let base_derivations = match &f.derivations {
            None => None,
            Some(fields) => Some(
                fields
                    .iter()
                    .map(|row| row.iter().map(|t| self.scalar(t, &base_scope)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        let mut built = Built { chart: chart.clone(), model, gamma, gamma_prime, density: None, model_density: None, corners, base_derivations, form: None };

        if let Some(d) = &f.density {
            let kind = match d.kind.as_str() {
                "density" => Kind::Density,
                "form" => Kind::Form,
                other => return Err(Error::Input(format!("unknown density kind `{other}`"))),
            };
            let (home, sys) = match d.on.as_str() {
                "main" => (chart.clone(), system(&systems, &chart, &d.coords)?.into_owned()),
                "model" => {
                    let (mchart, _) = built.model.as_ref().ok_or_else(|| Error::Input("density on model needs [model]".into()))?;
                    if d.coords != "standard" {
                        return Err(Error::Input("densities on the model use its standard coordinates".into()));
                    }
                    (mchart.clone(), CoordSystem::standard(mchart))
                }
                other => return Err(Error::Input(format!("unknown chart `{other}` for density"))),
            };
            let home_scope = Scope::on_chart(params, &home, true);
            let coeff = self.superfunction(&d.coeff, &home_scope)?;
            let coeff = if d.on == "main" { self.lifted(coeff, &d.lift, &built)? } else { coeff };
            let declared = BerezinDensity::new(kind, coeff, &sys).map_err(|e| e.context("density"))?;
            let body = declared.in_standard()?.coeff.body();
            let on_main = match &built.model {
                Some((_, phi)) if d.on == "model" => declared.pullback(phi).map_err(|e| e.context("density pullback"))?,
                _ => declared.clone(),
            };
            built.density = Some((on_main, body));
            if d.on == "model" {
                built.model_density = Some(declared);
            }
        }

        if let Some(fm) = &f.form {
            let sys = system(&systems, &chart, &fm.coords)?.into_owned();
            let comps = fm
                .components
                .iter()
                .map(|t| self.lifted(self.superfunction(t, &scope)?, &fm.lift, &built))
                .collect::<Result<_>>()?;
            built.form = Some(IntegralForm::new(&sys, comps).map_err(|e| e.context("integral form"))?);
        }
        Ok(built)
    }

    pub fn convention(&self, opts: &RunOptions) -> Result<Convention> {
        if let Some(c) = opts.convention {
            return Ok(c);
        }
        let mut c = Convention::default();
        if let Some(spec) = &self.file.convention {
            if let Some(s) = &spec.s {
                c.s = Convention::parse_s(s)?;
            }
            if let Some(b) = &spec.b {
                c.b = Convention::parse_b(b)?;
            }
        }
        Ok(c)
    }

    pub fn rule(&self, opts: &RunOptions) -> QuadratureRule {
        let spec = self.file.quadrature.as_ref();
        let order = opts.quad_order.or(spec.and_then(|q| q.order)).unwrap_or(QuadratureRule::default().order);
        let panels = spec.and_then(|q| q.panels).unwrap_or(1);
        QuadratureRule::with_panels(order, panels)
    }

    pub fn tolerance(&self, opts: &RunOptions) -> f64 {
        opts.tolerance.or(self.file.tolerance).unwrap_or(1e-8)
    }

    /// Bulk plus structurally nonzero boundary summands.
    pub fn count_terms(&self, opts: &RunOptions) -> Result<usize> {
        if self.file.mode != Mode::Corners {
            return Err(Error::Input("term counts exist for corners scenarios only".into()));
        }
        let _ = opts;
        let built = self.build(&self.params(&[])?)?;
        let (corners, omega, gamma, gamma_p) = corner_inputs(&built)?;
        let base = corners.default_base_derivations()?;
        let d = corners.lift_derivations(&base, gamma)?;
        CornerProblem { corners, omega, gamma, gamma_p, derivations: &d, base_derivations: &base }.count_terms()
    }

    pub fn run(&self, opts: &RunOptions) -> Result<Report> {
        let conv = self.convention(opts)?;
        let rule = self.rule(opts);
        let tol = self.tolerance(opts);
        let mut report = Report {
            scenario: self.file.name.clone(),
            mode: self.file.mode,
            convention: ConventionInfo { s: sign_rule_name(conv.s).into(), b: parity_rule_name(conv.b).into() },
            quadrature: QuadratureInfo { kind: "gauss-legendre", order: rule.order, panels: rule.panels },
            tolerance: tol,
            corners: vec![],
            stokes: vec![],
            quantities: BTreeMap::new(),
            checks: vec![],
            residual: 0.0,
            passed: false,
            warnings: vec![],
        };
        let mut f0: Option<(Expr, Vec<String>)> = None;
        match self.file.mode {
            Mode::Corners => self.run_corners(&rule, &conv, tol, &mut report, &mut f0)?,
            Mode::Stokes => self.run_stokes(&rule, &conv, tol, &mut report)?,
        }
        self.check_expectations(&conv, tol, &mut report, f0)?;
        report.residual = report.checks.iter().filter(|c| c.name.ends_with("residual")).map(|c| c.deviation).fold(0.0, f64::max);
        report.passed = report.checks.iter().all(|c| c.passed);
        Ok(report)
    }

    fn run_corners(
        &self,
        rule: &QuadratureRule,
        conv: &Convention,
        tol: f64,
        report: &mut Report,
        f0: &mut Option<(Expr, Vec<String>)>,
    ) -> Result<()> {
        let values: Vec<Option<(String, f64)>> = match &self.file.sweep {
            None => vec![None],
            Some(sw) => sw.values.iter().map(|v| Some((sw.parameter.clone(), *v))).collect(),
        };
        let mut reference = None;
        for v in &values {
            let params = self.params(&v.iter().cloned().collect::<Vec<_>>())?;
            let built = self.build(&params)?;
            let (corners, omega, gamma, gamma_p) = corner_inputs(&built)?;
            let base = match &built.base_derivations {
                Some(b) => b.clone(),
                None => corners.default_base_derivations()?,
            };
            let d: Vec<DiffOp> = corners.lift_derivations(&base, gamma)?;
            let problem = CornerProblem { corners, omega, gamma, gamma_p, derivations: &d, base_derivations: &base };
            let ctx = match v {
                Some((n, x)) => format!("corner identity at {n} = {x}"),
                None => "corner identity".to_string(),
            };
            let r = problem.run(rule, conv).map_err(|e| e.context(ctx))?;
            for w in r.warnings {
                if !report.warnings.contains(&w) {
                    report.warnings.push(w);
                }
            }
            if built.chart.region.has_mask() {
                let w = "masked region: indicator quadrature converges slowly near curved boundaries; prefer a mapped region".to_string();
                if !report.warnings.contains(&w) {
                    report.warnings.push(w);
                }
            }
            let run = CornerRun {
                parameter: v.clone(),
                direct: r.direct,
                bulk: r.bulk,
                terms: r.terms,
                boundary_total: r.boundary_total,
                residual: r.residual,
                base_terms: r.base_terms,
                base_boundary_total: r.base_boundary_total,
                base_residual: r.base_residual,
                term_count: r.nonzero_summands,
            };
            let label = v.as_ref().map(|(n, x)| format!("[{n}={x}]")).unwrap_or_default();
            report.checks.push(check(&format!("identity{label}.residual"), run.direct, run.bulk + run.boundary_total, tol));
            report.checks.push(check(&format!("base_identity{label}.residual"), run.direct, run.bulk + run.base_boundary_total, tol));
            report.corners.push(run);
            if f0.is_none() {
                let body = built.density.as_ref().map(|d| d.1.clone()).unwrap_or_else(Expr::zero);
                let vars = match &self.file.density {
                    Some(d) if d.on == "model" => built.model.as_ref().map(|m| m.0.vars.clone()).unwrap_or_default(),
                    _ => built.chart.vars.clone(),
                };
                *f0 = Some((body, vars));
            }
            if reference.is_none() && self.file.sweep.as_ref().is_some_and(|s| s.reference) {
                let (mchart, _) = built.model.as_ref().ok_or_else(|| Error::Input("sweep reference needs [model]".into()))?;
                let declared = built
                    .model_density
                    .as_ref()
                    .ok_or_else(|| Error::Input("sweep reference needs a density on the model".into()))?;
                reference = Some(declared.integrate(&Retraction::canonical(mchart), rule, conv)?);
            }
        }
        let q = &mut report.quantities;
        let last = report.corners.last().expect("at least one run");
        q.insert("term_count".into(), last.term_count as f64);
        q.insert("boundary_term_count".into(), last.terms.len() as f64);
        if values.len() == 1 {
            q.insert("direct".into(), last.direct);
            q.insert("bulk".into(), last.bulk);
            q.insert("boundary_total".into(), last.boundary_total);
            q.insert("base_boundary_total".into(), last.base_boundary_total);
            for (i, t) in last.terms.iter().enumerate() {
                q.insert(format!("term{i}"), t.value);
            }
        } else {
            let eps: Vec<f64> = values.iter().map(|v| v.as_ref().unwrap().1).collect();
            let lim = |get: fn(&CornerRun) -> f64| richardson_even(&eps, &report.corners.iter().map(get).collect::<Vec<_>>());
            let (d, b, t, bt) = (lim(|r| r.direct), lim(|r| r.bulk), lim(|r| r.boundary_total), lim(|r| r.base_boundary_total));
            q.insert("limit.direct".into(), d);
            q.insert("limit.bulk".into(), b);
            q.insert("limit.boundary_total".into(), t);
            q.insert("limit.base_boundary_total".into(), bt);
            if let Some(refv) = reference {
                q.insert("reference".into(), refv);
                report.checks.push(check("limit_identity.residual", refv, b + t, tol));
            }
        }
        Ok(())
    }

    fn run_stokes(&self, rule: &QuadratureRule, conv: &Convention, tol: f64, report: &mut Report) -> Result<()> {
        let params = self.params(&[])?;
        let built = self.build(&params)?;
        let corners = built.corners.as_ref().expect("corners are always built");
        let varpi = built.form.as_ref().expect("checked in parse");
        let spec = self.file.stokes.as_ref().expect("checked in parse");
        for name in &spec.boundaries {
            let boundary = match name.as_str() {
                "compatible" => Boundary::compatible(corners, &built.gamma),
                "naive" => Boundary::compatible(corners, &Retraction::canonical(&built.chart)),
                other => return Err(Error::Input(format!("unknown boundary structure `{other}`"))),
            }
            .map_err(|e| e.context(format!("{name} boundary")))?;
            let s = verify_stokes(corners, &built.gamma, &boundary, varpi, rule, conv)
                .map_err(|e| e.context(format!("Stokes identity, {name} boundary")))?;
            let g = stokes_general(corners, &boundary, &built.gamma, varpi, rule, conv)
                .map_err(|e| e.context(format!("corrected Stokes identity, {name} boundary")))?;
            let run = StokesRun {
                boundary: name.clone(),
                lhs: s.lhs,
                boundary_terms: s.boundary,
                sign_factor: s.sign_factor,
                rhs: s.rhs,
                residual: s.residual,
                classical_rhs: s.classical_rhs,
                classical_residual: s.classical_residual,
                general_boundary: g.boundary,
                transversal: g.transversal,
                general_rhs: g.rhs,
                general_residual: g.residual,
            };
            let q = &mut report.quantities;
            q.insert(format!("{name}.lhs"), run.lhs);
            q.insert(format!("{name}.rhs"), run.rhs);
            q.insert(format!("{name}.sign_factor"), run.sign_factor);
            q.insert(format!("{name}.transversal_total"), run.transversal.iter().sum());
            q.insert(format!("{name}.general_rhs"), run.general_rhs);
            if name == "compatible" {
                report.checks.push(check(&format!("{name}.stokes.residual"), run.lhs, run.rhs, tol));
            }
            report.checks.push(check(&format!("{name}.classical.residual"), run.lhs, run.classical_rhs, tol));
            report.checks.push(check(&format!("{name}.corrected.residual"), run.lhs, run.general_rhs, tol));
            report.stokes.push(run);
        }
        Ok(())
    }

    fn check_expectations(
        &self,
        conv: &Convention,
        tol: f64,
        report: &mut Report,
        f0: Option<(Expr, Vec<String>)>,
    ) -> Result<()> {
        let params = self.params(&[])?;
        let mut scope = Scope::numeric(&params);
        let c = *conv;
        scope.functions.insert(
            "sgn_s".into(),
            Arc::new(move |a: &[f64]| {
                if a.len() != 2 || a.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
                    return Err(Error::Input("sgn_s takes two non-negative integers".into()));
                }
                Ok(c.sign_s(a[0] as usize, a[1] as usize))
            }),
        );
        if let Some((body, vars)) = f0 {
            scope.functions.insert(
                "f0".into(),
                Arc::new(move |a: &[f64]| {
                    if a.len() != vars.len() {
                        return Err(Error::Input(format!("f0 takes {} coordinates", vars.len())));
                    }
                    body.eval(&vars.iter().cloned().zip(a.iter().cloned()).collect())
                }),
            );
        }
        for e in &self.file.expect {
            let value = *report
                .quantities
                .get(&e.quantity)
                .ok_or_else(|| Error::Input(format!("unknown quantity `{}`", e.quantity)))?;
            let ast = self.ast(&e.value)?;
            let expected = parse::eval_number(&ast, &scope).map_err(|err| self.locate(&e.value, err))?;
            let (v, x) = if e.magnitude { (value.abs(), expected.abs()) } else { (value, expected) };
            report.checks.push(check(&e.quantity, v, x, e.tolerance.unwrap_or(tol)));
        }
        Ok(())
    }
}

fn system<'a>(
    systems: &'a HashMap<String, CoordSystem>,
    chart: &Arc<Chart>,
    name: &str,
) -> Result<std::borrow::Cow<'a, CoordSystem>> {
    if name == "standard" {
        return Ok(std::borrow::Cow::Owned(CoordSystem::standard(chart)));
    }
    systems
        .get(name)
        .map(std::borrow::Cow::Borrowed)
        .ok_or_else(|| Error::Input(format!("unknown coordinate system `{name}`")))
}

fn corner_inputs(b: &Built) -> Result<(&CornerStructure, &BerezinDensity, &Retraction, &Retraction)> {
    let corners = b.corners.as_ref().ok_or_else(|| Error::Input("no corner structure".into()))?;
    let omega = &b.density.as_ref().ok_or_else(|| Error::Input("no density".into()))?.0;
    let gamma_p = b.gamma_prime.as_ref().ok_or_else(|| Error::Input("no gamma_prime".into()))?;
    Ok((corners, omega, &b.gamma, gamma_p))
}

fn check(name: &str, value: f64, expected: f64, tolerance: f64) -> Check {
    let deviation = (value - expected).abs();
    Check { name: name.into(), value, expected, deviation, tolerance, passed: deviation < tolerance }
}

fn line_col(src: &str, byte: usize) -> (usize, usize) {
    let before = &src[..byte.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map(|l| l.chars().count()).unwrap_or(0) + 1;
    (line, col)
}

pub fn sign_rule_name(s: SignRule) -> &'static str {
    match s {
        SignRule::Default => "default",
        SignRule::PqOnly => "pq-only",
        SignRule::HalfQ => "half-q",
    }
}

pub fn parity_rule_name(b: ParityRule) -> &'static str {
    match b {
        ParityRule::Default => "default",
        ParityRule::QOnly => "q-only",
    }
}
