#include "mop/mode.hpp"

#include <algorithm>
#include <cmath>

namespace mop {

std::string RouteTag::str() const {
  return context == Context::shared ? std::string("shared") : "specific:" + std::to_string(domain_id);
}

std::string ModeSpec::name(std::size_t layer, const std::string& part) const {
  return prefix + "." + std::to_string(layer) + "." + part;
}

std::string ModeSpec::expert(std::size_t layer, const RouteTag& route, const std::string& part) const {
  const std::string who = route.context == Context::shared ? "shared" : "d" + std::to_string(route.domain_id);
  return name(layer, "ffn." + who + "." + part);
}

void ModeSpec::check_route(const RouteTag& route) const {
  if (route.context == Context::shared) return;
  if (std::find(domains.begin(), domains.end(), route.domain_id) == domains.end()) {
    throw RoutingError("no expert for domain " + std::to_string(route.domain_id));
  }
}

namespace {

Matrix gaussian(std::size_t r, std::size_t c, double sd, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(r, c);
  for (auto& v : m.values()) v = dist(rng);
  return m;
}

}  // namespace

void init_mode_params(ad::ParamStore& store, const ModeSpec& spec, Rng& rng) {
  const std::size_t d = spec.dim, h = spec.hidden;
  if (d == 0 || spec.heads == 0 || d % spec.heads != 0) {
    throw ConfigError("head count " + std::to_string(spec.heads) + " must divide width " + std::to_string(d));
  }
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_h = 1.0 / std::sqrt(static_cast<double>(h));
  std::vector<RouteTag> routes{RouteTag::shared()};
  for (int dom : spec.domains) routes.push_back(RouteTag::specific(dom));
  for (std::size_t l = 0; l < spec.layers; ++l) {
    store.add(spec.name(l, "ln1.g"), Matrix(1, d, 1.0));
    store.add(spec.name(l, "ln1.b"), Matrix(1, d));
    for (const char* w : {"wq", "wk", "wv", "wo"}) store.add(spec.name(l, w), gaussian(d, d, sd, rng));
    store.add(spec.name(l, "bo"), Matrix(1, d));
    store.add(spec.name(l, "ln2.g"), Matrix(1, d, 1.0));
    store.add(spec.name(l, "ln2.b"), Matrix(1, d));
    for (const auto& r : routes) {
      store.add(spec.expert(l, r, "w1"), gaussian(d, h, sd, rng));
      store.add(spec.expert(l, r, "b1"), Matrix(1, h));
      store.add(spec.expert(l, r, "w2"), gaussian(h, d, sd_h, rng));
      store.add(spec.expert(l, r, "b2"), Matrix(1, d));
    }
  }
}

ad::Var mode_layer_forward(ad::Tape& tape, ad::ParamStore& store, const ModeSpec& spec, std::size_t layer,
                           ad::Var t_in, const std::vector<std::size_t>& offsets, const RouteTag& route) {
  spec.check_route(route);
  if (layer >= spec.layers) throw ConfigError("layer index out of range");
  auto p = [&](const std::string& part) { return tape.param(store, spec.name(layer, part)); };
  auto e = [&](const std::string& part) { return tape.param(store, spec.expert(layer, route, part)); };

  ad::Var x = ad::layer_norm_rows(t_in, p("ln1.g"), p("ln1.b"));
  ad::Var q = ad::matmul(x, p("wq"));
  ad::Var k = ad::matmul(x, p("wk"));
  ad::Var v = ad::matmul(x, p("wv"));
  ad::Var att = ad::segment_attention(q, k, v, offsets, spec.heads);
  ad::Var mid = ad::add(ad::add_row(ad::matmul(att, p("wo")), p("bo")), t_in);

  ad::Var y = ad::layer_norm_rows(mid, p("ln2.g"), p("ln2.b"));
  ad::Var hdn = ad::gelu(ad::add_row(ad::matmul(y, e("w1")), e("b1")));
  ad::Var out = ad::add_row(ad::matmul(hdn, e("w2")), e("b2"));
  return ad::add(out, mid);
}

ad::Var encode_motif(ad::Tape& tape, ad::ParamStore& store, const ModeSpec& spec, ad::Var t0,
                     const std::vector<std::size_t>& offsets, const RouteTag& route) {
  if (spec.layers == 0) throw ConfigError("the encoder needs at least one layer");
  ad::Var t = t0;
  for (std::size_t l = 0; l < spec.layers; ++l) t = mode_layer_forward(tape, store, spec, l, t, offsets, route);
  return t;
}

Matrix encode_motif(ad::ParamStore& store, const ModeSpec& spec, const Matrix& t0, const RouteTag& route) {
  if (t0.rows() == 0) throw ValidationError("empty motif");
  ad::Tape tape;
  std::vector<std::size_t> offsets{0, t0.rows()};
  return encode_motif(tape, store, spec, tape.constant(t0), offsets, route).value();
}

}  // namespace mop
