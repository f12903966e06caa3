#pragma once

// ReadOut of encoded motifs into node embeddings, with the three prompt
// templates and the output gate p_out applied to Concat(z, central).

#include <string>
#include <vector>

#include "mop/autodiff.hpp"
#include "mop/motif.hpp"

namespace mop {

enum class PromptMode : std::uint8_t { elementwise, matrix, attention };

const char* to_string(PromptMode mode);
PromptMode parse_prompt_mode(const std::string& s);

/// Parameter names of the prompts of one (domain, context):
/// prompt.d<domain>.<context>.{vec,mat,attn,out}.
std::string prompt_name(int domain, Context ctx, const std::string& part);
std::vector<std::string> prompt_names(int domain, Context ctx);

/// Registers identity prompts for every domain and context: p_vec = 1,
/// p_mat = I, attn_w = 0, p_out = 1. All of them start frozen.
void init_prompt_params(ad::ParamStore& store, std::size_t dim, const std::vector<int>& domains);

/// Tape handles of one (domain, context) prompt set.
struct PromptVars {
  PromptMode mode = PromptMode::elementwise;
  ad::Var vec, mat, attn, out;
};

PromptVars prompt_vars(ad::Tape& tape, ad::ParamStore& store, int domain, Context ctx, PromptMode mode);

/// Column mean of the rows of each motif segment.
ad::Var readout_plain(ad::Var t, const std::vector<std::size_t>& motif_offsets);
/// elementwise: mean_j p * t_j; matrix: mean_j P t_j; attention: sum_j softmax_j(w t_j) t_j.
ad::Var readout_prompted(ad::Var t, const std::vector<std::size_t>& motif_offsets, const PromptVars& prompts);

/// p_out * Concat(z, central), row by row.
ad::Var assemble_node_embedding(ad::Var z, ad::Var central, ad::Var p_out);

/// Prompted readouts of the motifs, mean-pooled per node (`node_offsets`
/// index motif segments; a node with no motif gets a zero motif half), then
/// assembled with the node's central row.
ad::Var node_embedding(ad::Var encoded, const std::vector<std::size_t>& motif_offsets,
                       const std::vector<std::size_t>& node_offsets, ad::Var central,
                       const PromptVars& prompts);

// Matrix forms for a single motif.
Matrix readout_plain(const Matrix& t);
Matrix readout_prompted(const Matrix& t, PromptMode mode, const Matrix& param);
Matrix assemble_node_embedding(const Matrix& z, const Matrix& central, const Matrix& p_out);

}  // namespace mop
