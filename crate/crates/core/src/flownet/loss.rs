use super::conditions::ConditionSet;
use super::model::{SceneInput, VelocityModel};
use crate::diffcore::{Gradients, Graph, NodeId, Tensor2};
use crate::error::{Error, Result};
use crate::scenario::constraint::{evaluate, ConstraintParams};
use crate::scenario::{Scene, SceneTokens};

/// Rows of rectified-flow training pairs on one scene, in model coordinates.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub x0: Tensor2,
    pub x1: Tensor2,
    pub ts: Vec<f64>,
    pub conds: Vec<ConditionSet>,
}

impl FlowBatch {
    fn check(&self) -> Result<()> {
        let n = self.ts.len();
        if self.x0.shape() != self.x1.shape() || self.x0.rows() != n || self.conds.len() != n {
            return Err(Error::Dimension(format!(
                "batch of x0 {}x{}, x1 {}x{}, {} times, {} condition sets",
                self.x0.rows(),
                self.x0.cols(),
                self.x1.rows(),
                self.x1.cols(),
                n,
                self.conds.len()
            )));
        }
        Ok(())
    }

    /// `x_t = (1 − t)·x0 + t·x1` row by row.
    pub fn interpolate(&self) -> Tensor2 {
        let c = self.x0.cols();
        let mut xt = self.x0.clone();
        for (i, v) in xt.data_mut().iter_mut().enumerate() {
            let t = self.ts[i / c];
            *v = (1.0 - t) * self.x0.data()[i] + t * self.x1.data()[i];
        }
        xt
    }
}

/// Records the mean squared error between the predicted velocity and
/// `x1 − x0`; returns the loss node.
pub fn rf_loss_graph(
    model: &VelocityModel,
    g: &mut Graph<'_>,
    scene: &SceneInput<'_>,
    batch: &FlowBatch,
) -> Result<NodeId> {
    batch.check()?;
    let xt = g.constant(batch.interpolate());
    let mut target = batch.x1.clone();
    target.add_scaled(&batch.x0, -1.0);
    let target = g.constant(target);
    let v = model.velocity_graph(g, xt, &batch.ts, scene, &batch.conds)?;
    let diff = g.sub(v, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

pub fn rf_loss(
    model: &VelocityModel,
    tokens: &SceneTokens,
    batch: &FlowBatch,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(&model.params);
    let l = rf_loss_graph(model, &mut g, &SceneInput::Tokens(tokens), batch)?;
    let value = g.scalar(l);
    Ok((value, g.backward(l)?))
}

/// Constraint scores `j` of each row as a graph node (rows × 3), with the
/// Jacobian taken in model coordinates.
fn constraint_node(
    model: &VelocityModel,
    g: &mut Graph<'_>,
    x: NodeId,
    scene: &Scene,
) -> Result<NodeId> {
    let cp = ConstraintParams::default();
    let xv = g.value(x).clone();
    let (rows, cols) = xv.shape();
    let mut values = Vec::with_capacity(rows);
    let mut jacs = Vec::with_capacity(rows);
    let scale = &model.normalizer().scale;
    for r in 0..rows {
        let meters = model.to_meters(xv.row_slice(r));
        let ev = evaluate(&meters, model.config.dt, scene, &cp);
        values.push(ev.score.as_array().to_vec());
        let data = ev
            .jacobian
            .iter()
            .flat_map(|row| row.iter().zip(scale).map(|(d, s)| d * s))
            .collect();
        jacs.push(Tensor2::from_vec(3, cols, data)?);
    }
    g.custom_rows(x, values, jacs)
}

/// `E(x) = ‖j(x + Δ·v(x, 1, c)) − j(x)‖²` per row (rows × 1).
pub fn energy_graph(
    model: &VelocityModel,
    g: &mut Graph<'_>,
    x: NodeId,
    scene_in: &SceneInput<'_>,
    scene: &Scene,
    conds: &[ConditionSet],
) -> Result<NodeId> {
    let rows = g.shape(x).0;
    let ts = vec![1.0; rows];
    let v = model.velocity_graph(g, x, &ts, scene_in, conds)?;
    let step = g.scale(v, model.config.refine_dt);
    let fx = g.add(x, step)?;
    let jf = constraint_node(model, g, fx, scene)?;
    let jx = constraint_node(model, g, x, scene)?;
    let d = g.sub(jf, jx)?;
    g.row_dot(d, d)
}

/// Energies of each row of `x` (model coordinates) and their gradients
/// with respect to `x`.
pub fn energy(
    model: &VelocityModel,
    scene_in: &SceneInput<'_>,
    scene: &Scene,
    x: &Tensor2,
    conds: &[ConditionSet],
) -> Result<(Vec<f64>, Tensor2)> {
    let mut g = Graph::new(&model.params);
    let xn = g.input(x.clone(), true);
    let e = energy_graph(model, &mut g, xn, scene_in, scene, conds)?;
    let values = g.value(e).data().to_vec();
    let total = g.sum(e);
    let grads = g.backward(total)?;
    let gx = grads
        .input(xn)
        .cloned()
        .unwrap_or_else(|| Tensor2::zeros(x.rows(), x.cols()));
    Ok((values, gx))
}

/// Mean over rows of `E(x_gen) − E(x1)`; generated endpoints are constants.
pub fn rfe_loss(
    model: &VelocityModel,
    tokens: &SceneTokens,
    scene: &Scene,
    generated: &Tensor2,
    x1: &Tensor2,
    conds: &[ConditionSet],
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(&model.params);
    let l = rfe_loss_graph(model, &mut g, &SceneInput::Tokens(tokens), scene, generated, x1, conds)?;
    let value = g.scalar(l);
    Ok((value, g.backward(l)?))
}

pub fn rfe_loss_graph(
    model: &VelocityModel,
    g: &mut Graph<'_>,
    scene_in: &SceneInput<'_>,
    scene: &Scene,
    generated: &Tensor2,
    x1: &Tensor2,
    conds: &[ConditionSet],
) -> Result<NodeId> {
    if generated.shape() != x1.shape() || generated.rows() != conds.len() {
        return Err(Error::Dimension(format!(
            "rfe batch of {}x{} generated, {}x{} targets, {} condition sets",
            generated.rows(),
            generated.cols(),
            x1.rows(),
            x1.cols(),
            conds.len()
        )));
    }
    let xg = g.constant(generated.clone());
    let xt = g.constant(x1.clone());
    let eg = energy_graph(model, g, xg, scene_in, scene, conds)?;
    let et = energy_graph(model, g, xt, scene_in, scene, conds)?;
    let d = g.sub(eg, et)?;
    Ok(g.mean(d))
}
