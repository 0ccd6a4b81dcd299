#include <memory>
#include <sstream>

#include <gtest/gtest.h>

#include "evasion/attacks.hpp"
#include "evasion/eval.hpp"
#include "evasion/remote.hpp"
#include "evasion/zoo.hpp"

using namespace evasion;

namespace {

const Zoo& blob_zoo() {
  static const Zoo zoo = build_zoo(ZooConfig::blobs_default(1));
  return zoo;
}

TopKServer::Classifier fixed_top1() {
  return [](const Tensor&) { return TopKResponse{{{2, 0.9}}}; };
}

PredictionApi loopback_api(const TopKServer& server, std::optional<std::uint64_t> budget = std::nullopt) {
  return remote_api(std::make_unique<TcpChannel>("127.0.0.1", server.port(), std::chrono::seconds(10)), budget);
}

}  // namespace

TEST(Wire, RequestRoundTrip) {
  const Tensor x(Shape{1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  const WireRequest r = decode_request(encode_request(42, x));
  EXPECT_EQ(r.id, 42u);
  EXPECT_TRUE(r.x == x);
}

TEST(Wire, MalformedRequestsNameTheField) {
  try {
    decode_request(R"({"id":1,"shape":[1,1,3],"pixels":[0.1,0.2]})");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.where(), "/pixels");
  }
  try {
    decode_request(R"({"id":-1,"shape":[1,1,1],"pixels":[0.1]})");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.where(), "/id");
  }
  EXPECT_THROW(decode_request("not json"), ParseError);
  EXPECT_THROW(decode_request(R"({"id":1,"shape":[1,1],"pixels":[]})"), ParseError);
}

TEST(Wire, ResponseValidation) {
  const TopKResponse r{{{3, 0.75}, {1, 0.25}}};
  EXPECT_EQ(decode_response(encode_response(7, r), 7), r);
  EXPECT_THROW(decode_response(encode_response(7, r), 8), TransportError);
  EXPECT_THROW(decode_response(R"({"topk":[{"label":0,"score":1.0}]})", 0), TransportError);
  EXPECT_THROW(decode_response(R"({"id":0,"topk":[]})", 0), TransportError);
  EXPECT_THROW(decode_response(encode_error(0, "boom"), 0), TransportError);
  EXPECT_THROW(decode_response("{", 0), TransportError);
  try {
    decode_response(R"({"topk":[]})", 0);
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.payload(), R"({"topk":[]})");
  }
}

TEST(Wire, ServeLineAnswersErrorsWithId) {
  const auto bad = serve_line(R"({"id":5,"shape":[1,1,2],"pixels":[0.5]})", fixed_top1());
  EXPECT_FALSE(bad.ok);
  const auto j = nlohmann::json::parse(bad.text);
  EXPECT_EQ(j["id"], 5);
  EXPECT_TRUE(j.contains("error"));
  const auto garbage = nlohmann::json::parse(serve_line("xyz", fixed_top1()).text);
  EXPECT_TRUE(garbage["id"].is_null());
}

TEST(Remote, StreamReplyWithoutIdIsTransportError) {
  std::istringstream in(R"({"topk":[{"label":0,"score":1.0}]})" "\n");
  std::ostringstream out;
  struct Borrowed final : LineChannel {
    StreamChannel inner;
    Borrowed(std::istream& i, std::ostream& o) : inner(i, o) {}
    void send_line(const std::string& l) override { inner.send_line(l); }
    std::string receive_line() override { return inner.receive_line(); }
  };
  PredictionApi api = remote_api(std::make_unique<Borrowed>(in, out));
  EXPECT_THROW(api.query(Tensor(Shape{1, 1, 2}, 0.5)), TransportError);
  EXPECT_EQ(nlohmann::json::parse(out.str())["id"], 0);
}

TEST(Remote, FixedServerAnswersEveryQuery) {
  TopKServer server(fixed_top1(), 0);
  server.start();
  PredictionApi api = loopback_api(server);
  const Tensor x(Shape{1, 1, 2}, 0.5);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(top1(api.query(x)), 2u);
  EXPECT_EQ(api.ledger().used(), 1000u);
  EXPECT_EQ(server.queries_served(), 1000u);
  server.stop();
}

TEST(Remote, MalformedRequestKeepsConnectionOpen) {
  TopKServer server(fixed_top1(), 0);
  server.start();
  TcpChannel ch("127.0.0.1", server.port(), std::chrono::seconds(10));
  ch.send_line("{\"id\": 3, \"shape\": oops}");
  const auto err = nlohmann::json::parse(ch.receive_line());
  EXPECT_TRUE(err.contains("error"));
  ch.send_line(encode_request(4, Tensor(Shape{1, 1, 2}, 0.5)));
  EXPECT_EQ(top1(ApiResponse{decode_response(ch.receive_line(), 4)}), 2u);
  server.stop();
}

TEST(Remote, TopOneServerSendsOneEntry) {
  TopKServer server(local_top_k_classifier(blob_zoo().victim.network, 1), 0);
  server.start();
  TcpChannel ch("127.0.0.1", server.port(), std::chrono::seconds(10));
  ch.send_line(encode_request(0, Tensor(Shape{1, 1, 2}, 0.5)));
  const auto j = nlohmann::json::parse(ch.receive_line());
  EXPECT_EQ(j["topk"].size(), 1u);
  server.stop();
}

TEST(Remote, MatchesInProcessAttack) {
  TopKServer server(local_top_k_classifier(blob_zoo().victim.network, 1), 0);
  server.start();
  const auto test = blob_zoo().test_set();
  const LabelFn label = [net = blob_zoo().victim.network](const Tensor& x) { return argmax(forward(*net, x)); };
  const ExperimentPlan plan = build_plan(select_entries(test, 6, label), label, 0.3);
  std::vector<EnsembleMember> members;
  for (const auto& m : blob_zoo().substitutes) members.push_back(EnsembleMember::for_attack_space(m.network, Shape{1, 1, 2}));
  const EnsembleSpec ens(members);
  for (const auto* p : plan.active()) {
    PredictionApi local = PredictionApi::local(blob_zoo().victim.network, Shape{1, 1, 2}, Postprocessor::top_k(1), 1000);
    PredictionApi remote = loopback_api(server, 1000);
    const AttackOutcome a = run_prism(p->setting, local, ens);
    const AttackOutcome b = run_prism(p->setting, remote, ens);
    EXPECT_EQ(a.success, b.success);
    EXPECT_EQ(a.queries_used, b.queries_used);
    EXPECT_TRUE(a.x_adv == b.x_adv);
  }
  server.stop();
}

TEST(Remote, BusyPortIsTransportError) {
  TopKServer first(fixed_top1(), 0);
  EXPECT_THROW(TopKServer(fixed_top1(), first.port()), TransportError);
}

TEST(Remote, ConnectionRefusedIsTransportError) {
  std::uint16_t port = 0;
  {
    TopKServer probe(fixed_top1(), 0);
    port = probe.port();
  }
  EXPECT_THROW(TcpChannel("127.0.0.1", port, std::chrono::seconds(1)), TransportError);
}
