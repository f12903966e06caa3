#include "mop/readout.hpp"

namespace mop {

const char* to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::elementwise: return "elementwise";
    case PromptMode::matrix: return "matrix";
    case PromptMode::attention: return "attention";
  }
  return "?";
}

PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "elementwise") return PromptMode::elementwise;
  if (s == "matrix") return PromptMode::matrix;
  if (s == "attention") return PromptMode::attention;
  throw ConfigError("unknown prompt mode '" + s + "'");
}

std::string prompt_name(int domain, Context ctx, const std::string& part) {
  return "prompt.d" + std::to_string(domain) + "." + to_string(ctx) + "." + part;
}

std::vector<std::string> prompt_names(int domain, Context ctx) {
  std::vector<std::string> out;
  for (const char* part : {"vec", "mat", "attn", "out"}) out.push_back(prompt_name(domain, ctx, part));
  return out;
}

void init_prompt_params(ad::ParamStore& store, std::size_t dim, const std::vector<int>& domains) {
  for (int dom : domains) {
    for (Context ctx : {Context::shared, Context::specific}) {
      store.add(prompt_name(dom, ctx, "vec"), Matrix(1, dim, 1.0));
      store.add(prompt_name(dom, ctx, "mat"), Matrix::identity(dim));
      store.add(prompt_name(dom, ctx, "attn"), Matrix(1, dim));
      store.add(prompt_name(dom, ctx, "out"), Matrix(1, 2 * dim, 1.0));
      for (const auto& name : prompt_names(dom, ctx)) store.freeze(name);
    }
  }
}

PromptVars prompt_vars(ad::Tape& tape, ad::ParamStore& store, int domain, Context ctx, PromptMode mode) {
  PromptVars v;
  v.mode = mode;
  v.vec = tape.param(store, prompt_name(domain, ctx, "vec"));
  v.mat = tape.param(store, prompt_name(domain, ctx, "mat"));
  v.attn = tape.param(store, prompt_name(domain, ctx, "attn"));
  v.out = tape.param(store, prompt_name(domain, ctx, "out"));
  return v;
}

ad::Var readout_plain(ad::Var t, const std::vector<std::size_t>& motif_offsets) {
  for (std::size_t s = 0; s + 1 < motif_offsets.size(); ++s) {
    if (motif_offsets[s] == motif_offsets[s + 1]) throw ValidationError("readout of an empty motif");
  }
  return ad::segment_mean(t, motif_offsets);
}

ad::Var readout_prompted(ad::Var t, const std::vector<std::size_t>& motif_offsets, const PromptVars& prompts) {
  switch (prompts.mode) {
    // Both linear modes commute with the mean, so the prompt is applied to
    // one row per motif.
    case PromptMode::elementwise:
      return ad::mul_row(readout_plain(t, motif_offsets), prompts.vec);
    case PromptMode::matrix:
      return ad::matmul_bt(readout_plain(t, motif_offsets), prompts.mat);
    case PromptMode::attention: {
      readout_plain(t, motif_offsets);  // rejects empty motifs
      ad::Var scores = ad::matmul_bt(t, prompts.attn);
      ad::Var weights = ad::segment_softmax(scores, motif_offsets);
      return ad::segment_sum(ad::mul_col(t, weights), motif_offsets);
    }
  }
  throw ConfigError("bad prompt mode");
}

ad::Var assemble_node_embedding(ad::Var z, ad::Var central, ad::Var p_out) {
  return ad::mul_row(ad::concat_cols(z, central), p_out);
}

ad::Var node_embedding(ad::Var encoded, const std::vector<std::size_t>& motif_offsets,
                       const std::vector<std::size_t>& node_offsets, ad::Var central,
                       const PromptVars& prompts) {
  ad::Var per_motif = readout_prompted(encoded, motif_offsets, prompts);
  ad::Var z = ad::segment_mean(per_motif, node_offsets);
  return assemble_node_embedding(z, central, prompts.out);
}

namespace {

PromptVars constant_prompts(ad::Tape& tape, PromptMode mode, const Matrix& param, std::size_t d) {
  PromptVars v;
  v.mode = mode;
  v.vec = tape.constant(mode == PromptMode::elementwise ? param : Matrix(1, d, 1.0));
  v.mat = tape.constant(mode == PromptMode::matrix ? param : Matrix::identity(d));
  v.attn = tape.constant(mode == PromptMode::attention ? param : Matrix(1, d));
  v.out = tape.constant(Matrix(1, 2 * d, 1.0));
  return v;
}

}  // namespace

Matrix readout_plain(const Matrix& t) {
  if (t.rows() == 0) throw ValidationError("readout of an empty motif");
  ad::Tape tape;
  return readout_plain(tape.constant(t), {0, t.rows()}).value();
}

Matrix readout_prompted(const Matrix& t, PromptMode mode, const Matrix& param) {
  if (t.rows() == 0) throw ValidationError("readout of an empty motif");
  ad::Tape tape;
  auto prompts = constant_prompts(tape, mode, param, t.cols());
  return readout_prompted(tape.constant(t), {0, t.rows()}, prompts).value();
}

Matrix assemble_node_embedding(const Matrix& z, const Matrix& central, const Matrix& p_out) {
  require_shape(z.rows() == 1 && central.rows() == 1 && z.cols() == central.cols() &&
                    p_out.rows() == 1 && p_out.cols() == 2 * z.cols(),
                "node embedding parts must be 1 x d, 1 x d and 1 x 2d");
  ad::Tape tape;
  return assemble_node_embedding(tape.constant(z), tape.constant(central), tape.constant(p_out)).value();
}

}  // namespace mop
