#ifndef EVASION_REMOTE_HPP
#define EVASION_REMOTE_HPP

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <json.hpp>

#include "evasion/api.hpp"
#include "evasion/errors.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

// --- wire format -----------------------------------------------------------
//
// One JSON object per line.
//   request:  {"id": u64, "shape": [c,h,w], "pixels": [f64...]}
//   response: {"id": u64, "topk": [{"label": u32, "score": f64}...]}
//   failure:  {"id": u64 or null, "error": "..."}

inline std::string encode_request(std::uint64_t id, const Tensor& x) {
  const Shape& s = x.shape();
  nlohmann::json j{{"id", id}, {"shape", {s.channels, s.height, s.width}}, {"pixels", x.vector()}};
  return j.dump();
}

struct WireRequest {
  std::uint64_t id = 0;
  Tensor x;
};

/// Parses a request line; ParseError names the offending field.
inline WireRequest decode_request(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("request", e.what());
  }
  if (!j.is_object()) throw ParseError("request", "expected an object");
  if (!j.contains("id") || !j["id"].is_number_unsigned()) throw ParseError("/id", "expected u64");
  if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 3) {
    throw ParseError("/shape", "expected [c,h,w]");
  }
  if (!j.contains("pixels") || !j["pixels"].is_array()) throw ParseError("/pixels", "expected array");
  Shape s;
  std::vector<double> px;
  try {
    s = Shape{j["shape"][0].get<std::size_t>(), j["shape"][1].get<std::size_t>(),
              j["shape"][2].get<std::size_t>()};
    px = j["pixels"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("request", e.what());
  }
  try {
    return {j["id"].get<std::uint64_t>(), Tensor(s, std::move(px))};
  } catch (const DimensionError& e) {
    throw ParseError("/pixels", e.what());
  }
}

inline std::string encode_response(std::uint64_t id, const TopKResponse& r) {
  nlohmann::json topk = nlohmann::json::array();
  for (const auto& e : r.entries) topk.push_back({{"label", e.label}, {"score", e.score}});
  return nlohmann::json{{"id", id}, {"topk", topk}}.dump();
}

inline std::string encode_error(std::optional<std::uint64_t> id, const std::string& message) {
  nlohmann::json j{{"error", message}};
  j["id"] = id ? nlohmann::json(*id) : nlohmann::json(nullptr);
  return j.dump();
}

/// Validates a response line against the expected id.
inline TopKResponse decode_response(const std::string& line, std::uint64_t expected_id) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw TransportError(std::string("malformed reply: ") + e.what(), line);
  }
  if (!j.is_object()) throw TransportError("reply is not an object", line);
  if (!j.contains("id")) throw TransportError("reply missing \"id\"", line);
  if (j.contains("error")) {
    throw TransportError("server error: " + j["error"].dump(), line);
  }
  if (!j["id"].is_number_unsigned() || j["id"].get<std::uint64_t>() != expected_id) {
    throw TransportError("reply id does not match request " + std::to_string(expected_id), line);
  }
  if (!j.contains("topk") || !j["topk"].is_array() || j["topk"].empty()) {
    throw TransportError("reply missing non-empty \"topk\"", line);
  }
  TopKResponse r;
  for (const auto& e : j["topk"]) {
    if (!e.is_object() || !e.contains("label") || !e["label"].is_number_unsigned() ||
        !e.contains("score") || !e["score"].is_number()) {
      throw TransportError("malformed topk entry", line);
    }
    r.entries.push_back({e["label"].get<std::size_t>(), e["score"].get<double>()});
  }
  return r;
}

struct ServedLine {
  std::string text;
  bool ok = false;
};

/// Answers one request line with one response line. Malformed requests get an
/// error object; the caller keeps the connection open.
inline ServedLine serve_line(const std::string& line,
                             const std::function<TopKResponse(const Tensor&)>& classify) {
  std::optional<std::uint64_t> id;
  try {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_object() && j.contains("id") && j["id"].is_number_unsigned()) id = j["id"].get<std::uint64_t>();
    WireRequest req = decode_request(line);
    return {encode_response(req.id, classify(req.x)), true};
  } catch (const std::exception& e) {
    return {encode_error(id, e.what()), false};
  }
}

// --- transports ------------------------------------------------------------

class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void send_line(const std::string& line) = 0;
  virtual std::string receive_line() = 0;
};

/// Lines over a pair of iostreams (stdio or in-memory).
class StreamChannel final : public LineChannel {
 public:
  StreamChannel(std::istream& in, std::ostream& out) : in_(in), out_(out) {}

  void send_line(const std::string& line) override {
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw TransportError("stream closed while sending");
  }

  std::string receive_line() override {
    std::string line;
    if (!std::getline(in_, line)) throw TransportError("stream closed while waiting for a reply");
    return line;
  }

 private:
  std::istream& in_;
  std::ostream& out_;
};

/// Lines over a TCP connection; every receive is bounded by `timeout`.
class TcpChannel final : public LineChannel {
 public:
  TcpChannel(const std::string& host, std::uint16_t port,
             std::chrono::milliseconds timeout = std::chrono::seconds(30))
      : socket_(io_), timeout_(timeout) {
    boost::system::error_code ec;
    boost::asio::ip::tcp::resolver resolver(io_);
    auto endpoints = resolver.resolve(host, std::to_string(port), ec);
    if (ec) throw TransportError("cannot resolve " + host + ": " + ec.message());
    boost::asio::connect(socket_, endpoints, ec);
    if (ec) throw TransportError("cannot connect to " + host + ":" + std::to_string(port) + ": " + ec.message());
    socket_.set_option(boost::asio::ip::tcp::no_delay(true));
  }

  void send_line(const std::string& line) override {
    boost::system::error_code ec;
    std::string framed = line + '\n';
    boost::asio::write(socket_, boost::asio::buffer(framed), ec);
    if (ec) throw TransportError("send failed: " + ec.message());
  }

  std::string receive_line() override {
    boost::system::error_code result = boost::asio::error::would_block;
    std::size_t n = 0;
    boost::asio::async_read_until(socket_, buffer_, '\n',
                                  [&](const boost::system::error_code& ec, std::size_t bytes) {
                                    result = ec;
                                    n = bytes;
                                  });
    io_.restart();
    io_.run_for(timeout_);
    if (result == boost::asio::error::would_block) {
      socket_.cancel();
      io_.restart();
      io_.run();
      throw TransportError("timed out waiting for a reply");
    }
    if (result) throw TransportError("receive failed: " + result.message());
    std::string line(boost::asio::buffers_begin(buffer_.data()),
                     boost::asio::buffers_begin(buffer_.data()) + static_cast<std::ptrdiff_t>(n - 1));
    buffer_.consume(n);
    return line;
  }

 private:
  boost::asio::io_context io_;
  boost::asio::ip::tcp::socket socket_;
  boost::asio::streambuf buffer_;
  std::chrono::milliseconds timeout_;
};

/// A classifier reached over a line channel; one synchronous exchange per query.
class RemoteBackend final : public ClassifierBackend {
 public:
  explicit RemoteBackend(std::unique_ptr<LineChannel> channel) : channel_(std::move(channel)) {
    if (!channel_) throw ArgumentError("remote backend needs a channel");
  }

  ApiResponse respond(const Tensor& x) override {
    const std::uint64_t id = next_id_++;
    channel_->send_line(encode_request(id, x));
    return decode_response(channel_->receive_line(), id);
  }

 private:
  std::unique_ptr<LineChannel> channel_;
  std::uint64_t next_id_ = 0;
};

inline PredictionApi remote_api(std::unique_ptr<LineChannel> channel,
                                std::optional<std::uint64_t> budget = std::nullopt) {
  return PredictionApi(std::make_unique<RemoteBackend>(std::move(channel)), QueryLedger(budget));
}

// --- server ----------------------------------------------------------------

/// Serves the wire protocol on a loopback TCP port, one thread per
/// connection. Port 0 picks a free port; `port()` reports it.
class TopKServer {
 public:
  using Classifier = std::function<TopKResponse(const Tensor&)>;

  TopKServer(Classifier classify, std::uint16_t port, const std::string& address = "127.0.0.1")
      : classify_(std::move(classify)), acceptor_(io_) {
    boost::system::error_code ec;
    boost::asio::ip::tcp::endpoint ep(boost::asio::ip::make_address(address, ec), port);
    if (ec) throw ArgumentError("bad listen address " + address);
    acceptor_.open(ep.protocol(), ec);
    if (!ec) acceptor_.set_option(boost::asio::ip::tcp::acceptor::reuse_address(true), ec);
    if (!ec) acceptor_.bind(ep, ec);
    if (!ec) acceptor_.listen(boost::asio::socket_base::max_listen_connections, ec);
    if (ec) throw TransportError("cannot listen on port " + std::to_string(port) + ": " + ec.message());
  }

  ~TopKServer() { stop(); }
  TopKServer(const TopKServer&) = delete;
  TopKServer& operator=(const TopKServer&) = delete;

  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }
  std::uint64_t queries_served() const noexcept { return served_.load(); }

  /// Called from the connection's thread when it closes, with the running
  /// total of answered queries.
  void on_disconnect(std::function<void(std::uint64_t)> fn) { on_disconnect_ = std::move(fn); }

  /// Accepts connections until stop(); blocks the calling thread.
  void run() {
    while (!stopping_.load()) {
      auto socket = std::make_shared<boost::asio::ip::tcp::socket>(io_);
      boost::system::error_code ec;
      acceptor_.accept(*socket, ec);
      if (ec || stopping_.load()) {
        if (stopping_.load()) break;
        continue;
      }
      std::lock_guard<std::mutex> lock(mutex_);
      sockets_.push_back(socket);
      workers_.emplace_back([this, socket] { handle(*socket); });
    }
  }

  /// Runs the accept loop on a background thread.
  void start() {
    accept_thread_ = std::thread([this] { run(); });
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    boost::system::error_code ec;
    if (accept_thread_.joinable()) {
      // A blocking accept only returns on a connection, so make one.
      boost::asio::io_context wake_io;
      boost::asio::ip::tcp::socket wake(wake_io);
      wake.connect(acceptor_.local_endpoint(), ec);
      accept_thread_.join();
    }
    acceptor_.close(ec);
    std::vector<std::thread> workers;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      for (auto& s : sockets_) {
        s->shutdown(boost::asio::ip::tcp::socket::shutdown_both, ec);
        s->close(ec);
      }
      workers.swap(workers_);
    }
    for (auto& t : workers) {
      if (t.joinable()) t.join();
    }
  }

 private:
  void handle(boost::asio::ip::tcp::socket& socket) {
    boost::asio::streambuf buf;
    boost::system::error_code ec;
    std::istream in(&buf);
    while (true) {
      boost::asio::read_until(socket, buf, '\n', ec);
      if (ec) break;
      std::string line;
      std::getline(in, line);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      ServedLine reply = serve_line(line, classify_);
      if (reply.ok) ++served_;
      reply.text += '\n';
      boost::asio::write(socket, boost::asio::buffer(reply.text), ec);
      if (ec) break;
    }
    if (on_disconnect_) on_disconnect_(served_.load());
  }

  Classifier classify_;
  std::function<void(std::uint64_t)> on_disconnect_;
  boost::asio::io_context io_;
  boost::asio::ip::tcp::acceptor acceptor_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> served_{0};
  std::mutex mutex_;
  std::vector<std::shared_ptr<boost::asio::ip::tcp::socket>> sockets_;
  std::vector<std::thread> workers_;
  std::thread accept_thread_;
};

/// Top-k classifier for a local network; each request is resized from its
/// own shape to the network's native size.
inline TopKServer::Classifier local_top_k_classifier(std::shared_ptr<const Network> net, std::size_t k) {
  if (!net) throw ArgumentError("server needs a network");
  const Postprocessor post = Postprocessor::top_k(k);
  if (k > net->n_classes()) throw ArgumentError("top-k with k > number of classes");
  return [net, post](const Tensor& x) {
    const Preprocessor pre = Preprocessor::to_native(x.shape(), net->input_shape());
    return std::get<TopKResponse>(postprocess(forward(*net, pre.apply(x)), post));
  };
}

}  // namespace evasion

#endif  // EVASION_REMOTE_HPP
