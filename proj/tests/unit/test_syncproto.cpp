#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <thread>

#include "fault_transport.hpp"
#include "openchamber/syncproto.hpp"

using namespace openchamber;
using namespace openchamber::testing;

namespace {

Document recipe_doc(const std::string& id, int n = 0) {
  return {id,
          0,
          DocumentKind::recipe,
          Json{{"_id", id}, {"format", "simple"}, {"operations", Json::array({Json::array({0, "air_temperature", n})})}},
          false,
          {}};
}

Document batch_doc(const std::string& run, int n) {
  return {"batch:" + run + ":" + std::to_string(n),
          0,
          DocumentKind::datapoint_batch,
          Json{{"run_id", run}, {"first", n * 10}, {"last", n * 10}, {"points", Json::array({Json::array({n * 10, "air_temperature", 22.5, "measured"})})}},
          false,
          {}};
}

void store_fake_run(Datastore& store, const std::string& run, int batches) {
  RunMeta meta;
  meta.run_id = run;
  meta.recipe_id = "r";
  put_run_meta(store, meta);
  for (int i = 0; i < batches; ++i) store.put(batch_doc(run, i));
}

std::set<std::string> ids(const Datastore& store) {
  std::set<std::string> out;
  for (const auto& d : store.documents()) out.insert(d.id);
  return out;
}

WireRequest versioned(std::string method, std::string path, std::string body = {}) {
  return {std::move(method), std::move(path), {}, {{"X-Sync-Version", "1"}}, std::move(body)};
}

}  // namespace

TEST_SUITE("syncproto") {
  TEST_CASE("fresh client pulls only recipes") {
    Datastore server_store;
    for (int i = 0; i < 3; ++i) server_store.put(recipe_doc("recipe-" + std::to_string(i)));
    store_fake_run(server_store, "cloud-run", 5);
    SyncServer server(server_store);
    LocalTransport transport(server);

    Datastore client;
    SyncClient sync(client, transport, "pfc-1");
    SyncReport report = sync.sync();
    CHECK(report.pulled == 3);
    CHECK(report.pushed == 0);
    CHECK(client.document_count() == 3);
    for (const auto& d : client.documents()) {
      CHECK(d.kind == DocumentKind::recipe);
      CHECK(d.origin == SyncClient::kServerOrigin);
    }
    CHECK(report.pull_checkpoint == server_store.last_sequence());
    CHECK(server.checkpoint("pfc-1", SyncDirection::pull) == server_store.last_sequence());
  }

  TEST_CASE("client telemetry is uploaded in full") {
    Datastore server_store;
    SyncServer server(server_store);
    LocalTransport transport(server);
    Datastore client;
    const int n = 250;
    for (int i = 0; i < n; ++i) client.put(batch_doc("run-0001", i));
    SyncClient sync(client, transport, "pfc-1");
    SyncReport report = sync.sync();
    CHECK(report.pushed == n);
    CHECK(report.pulled == 0);
    CHECK(server_store.document_count() == n);
    for (const auto& id : ids(client)) {
      auto copy = server_store.get("pfc-1/" + id);
      REQUIRE(copy);
      CHECK(copy->origin == "pfc-1");
      CHECK(copy->body == client.get(id)->body);
    }
    CHECK(report.push_checkpoint == client.last_sequence());
    CHECK(server.checkpoint("pfc-1", SyncDirection::push) == client.last_sequence());

    SUBCASE("an immediate second sync moves nothing") {
      auto before = server_store.last_sequence();
      SyncReport again = sync.sync();
      CHECK(again.pushed == 0);
      CHECK(again.pulled == 0);
      CHECK(server_store.last_sequence() == before);
      CHECK(again.push_checkpoint == report.push_checkpoint);
    }
  }

  TEST_CASE("updated documents are pushed at their latest revision only") {
    Datastore server_store;
    SyncServer server(server_store);
    LocalTransport transport(server);
    Datastore client;
    client.put(recipe_doc("r"));
    client.put(recipe_doc("r", 5), 1);
    client.put(recipe_doc("r", 6), 2);
    SyncClient sync(client, transport, "pfc-1");
    CHECK(sync.sync().pushed == 1);
    CHECK(server_store.get("pfc-1/r")->revision == 3);
    CHECK(server_store.last_sequence() == 1);
  }

  TEST_CASE("two clients pushing disjoint runs concurrently") {
    Datastore server_store;
    SyncServer server(server_store);
    SyncHttpServer http(server);
    int port = http.start("127.0.0.1", 0);
    std::string url = "http://127.0.0.1:" + std::to_string(port);

    Datastore a, b;
    auto points = [](const std::string& run, Seconds ticks) {
      std::vector<DataPoint> out;
      for (Seconds t = 0; t < ticks; ++t)
        for (Variable v : kAllVariables) out.push_back({t * 10, v, static_cast<double>(t) / 7.0, Stream::measured, run});
      return out;
    };
    RunMeta meta;
    meta.run_id = "run-0001";
    store_run(a, meta, points("run-0001", 3000), kVariableCount);
    store_run(b, meta, points("run-0001", 2000), kVariableCount);

    std::thread ta([&] {
      HttpTransport t(url);
      SyncClient(a, t, "alpha").sync();
    });
    std::thread tb([&] {
      HttpTransport t(url);
      SyncClient(b, t, "beta").sync();
    });
    ta.join();
    tb.join();

    CHECK(server_store.document_count() == a.document_count() + b.document_count());
    auto feed = server_store.changes_since(0);
    for (std::size_t i = 0; i < feed.size(); ++i) REQUIRE(feed[i].sequence == static_cast<Sequence>(i) + 1);
    // Union of both client exports equals the server's exports.
    CHECK(export_csv(server_store, "alpha/run-0001") == export_csv(a, "run-0001"));
    CHECK(export_csv(server_store, "beta/run-0001") == export_csv(b, "run-0001"));
    auto runs = server_store.runs();
    CHECK(runs == std::vector<std::string>{"alpha/run-0001", "beta/run-0001"});
    http.stop();
  }

  TEST_CASE("replaying a push after a dropped ack stores no duplicates") {
    Datastore server_store;
    SyncServer server(server_store);
    LocalTransport local(server);
    Datastore client;
    for (int i = 0; i < 150; ++i) client.put(batch_doc("run-0001", i));

    // health ok, first push delivered but its ack is lost.
    FaultTransport flaky(local, [](std::size_t call, const WireRequest& r) {
      return call == 1 && r.path == "/replicate/push" ? Fault::drop_response : Fault::none;
    });
    SyncClient sync(client, flaky, "pfc-1");
    try {
      sync.sync();
      FAIL("expected NetworkUnavailable");
    } catch (const SyncError& e) {
      CHECK(e.code() == SyncErrorCode::NetworkUnavailable);
    }
    CHECK(server_store.document_count() == 100);
    CHECK(sync.checkpoint(SyncDirection::push).last_acknowledged_sequence == 0);

    SyncReport report = sync.sync();
    CHECK(report.pushed == 150);  // the first batch is re-sent...
    CHECK(server_store.document_count() == 150);
    CHECK(server_store.last_sequence() == 150);  // ...but applied once
  }

  TEST_CASE("a damaged batch is retried, not skipped") {
    Datastore server_store;
    server_store.put(recipe_doc("cloud"));
    SyncServer server(server_store);
    LocalTransport local(server);
    Datastore client;
    for (int i = 0; i < 10; ++i) client.put(batch_doc("run-0001", i));
    FaultTransport flaky(local, [](std::size_t call, const WireRequest&) {
      if (call == 1) return Fault::corrupt_request;
      if (call == 3) return Fault::corrupt_response;
      return Fault::none;
    });
    SyncClient sync(client, flaky, "pfc-1");
    SyncReport report = sync.sync();
    CHECK(flaky.faults() == 2);
    CHECK(report.pushed == 10);
    CHECK(report.pulled == 1);
    for (const auto& d : server_store.documents()) CHECK_FALSE(d.body.contains("tampered"));
    CHECK_FALSE(client.get("cloud")->body.contains("tampered"));
  }

  TEST_CASE("persistent damage surfaces as ChecksumMismatch") {
    Datastore server_store;
    SyncServer server(server_store);
    LocalTransport local(server);
    Datastore client;
    client.put(recipe_doc("x"));
    FaultTransport flaky(local, [](std::size_t, const WireRequest& r) {
      return r.path == "/replicate/push" ? Fault::corrupt_request : Fault::none;
    });
    SyncClient sync(client, flaky, "pfc-1");
    try {
      sync.sync();
      FAIL("expected ChecksumMismatch");
    } catch (const SyncError& e) {
      CHECK(e.code() == SyncErrorCode::ChecksumMismatch);
    }
    CHECK(server_store.document_count() == 0);
    CHECK(sync.checkpoint(SyncDirection::push).last_acknowledged_sequence == 0);
  }

  TEST_CASE("version mismatch changes nothing") {
    Datastore server_store;
    SyncServer server(server_store);
    Json body{{"peer", "p"}, {"since", 0}, {"last_seq", 1}, {"count", 0}, {"checksum", batch_checksum(Json::array())},
              {"docs", Json::array()}};
    WireRequest req = versioned("POST", "/replicate/push", body.dump());
    req.headers["X-Sync-Version"] = "2";
    auto res = server.handle(req);
    CHECK(res.status == 400);
    CHECK(Json::parse(res.body)["error"]["code"] == "ProtocolVersionMismatch");
    req.headers.erase("X-Sync-Version");
    CHECK(server.handle(req).status == 400);
    CHECK(server_store.last_sequence() == 0);
    CHECK(server.checkpoint("p", SyncDirection::push) == 0);

    // A client facing a newer server stops before touching anything.
    struct NewerServer : Transport {
      WireResponse send(const WireRequest&) override { return {200, R"({"status":"ok","protocol":2})"}; }
    } newer;
    Datastore client;
    client.put(recipe_doc("x"));
    SyncClient sync(client, newer, "p");
    try {
      sync.sync();
      FAIL("expected ProtocolVersionMismatch");
    } catch (const SyncError& e) {
      CHECK(e.code() == SyncErrorCode::ProtocolVersionMismatch);
    }
    CHECK_FALSE(client.get_local("sync/p/push"));
  }

  TEST_CASE("unreachable server leaves the client untouched") {
    Datastore client;
    client.put(recipe_doc("x"));
    client.set_local("other", 1);
    DeadTransport dead;
    SyncClient sync(client, dead, "pfc-1");
    try {
      sync.sync();
      FAIL("expected NetworkUnavailable");
    } catch (const SyncError& e) {
      CHECK(e.code() == SyncErrorCode::NetworkUnavailable);
    }
    CHECK(client.last_sequence() == 1);
    CHECK_FALSE(client.get_local("sync/pfc-1/push"));
    CHECK_FALSE(client.get_local("sync/pfc-1/pull"));

    HttpTransport nowhere("http://127.0.0.1:1", 1);
    try {
      SyncClient(client, nowhere, "pfc-1").sync();
      FAIL("expected NetworkUnavailable");
    } catch (const SyncError& e) {
      CHECK(e.code() == SyncErrorCode::NetworkUnavailable);
    }
    CHECK(client.last_sequence() == 1);
  }

  TEST_CASE("bearer token over HTTP") {
    Datastore server_store;
    SyncServer server(server_store, "s3cret");
    SyncHttpServer http(server);
    int port = http.start("127.0.0.1", 0);
    HttpTransport transport("http://127.0.0.1:" + std::to_string(port));
    Datastore client;
    client.put(recipe_doc("x"));
    try {
      SyncClient(client, transport, "pfc-1", KindFilter{DocumentKind::recipe}, "wrong").sync();
      FAIL("expected Unauthorized");
    } catch (const SyncError& e) {
      CHECK(e.code() == SyncErrorCode::Unauthorized);
    }
    CHECK(server_store.document_count() == 0);
    SyncReport ok = SyncClient(client, transport, "pfc-1", KindFilter{DocumentKind::recipe}, "s3cret").sync();
    CHECK(ok.pushed == 1);
    CHECK(server_store.get("pfc-1/x"));
    http.stop();
  }

  TEST_CASE("pull conflicts keep the server copy and preserve the local one") {
    Datastore server_store;
    server_store.put(recipe_doc("shared", 25));
    SyncServer server(server_store);
    LocalTransport transport(server);
    Datastore client;
    client.put(recipe_doc("shared", 30));
    SyncClient sync(client, transport, "pfc-1");
    SyncReport report = sync.sync();
    REQUIRE(report.conflicts.size() == 1);
    CHECK(report.conflicts[0].id == "shared");
    CHECK(report.conflicts[0].client_revision == 1);
    CHECK(report.conflicts[0].server_revision == 1);
    CHECK(report.conflicts[0].preserved_as == "shared~conflict-1");
    CHECK(client.get("shared")->body == server_store.get("shared")->body);
    CHECK(client.get("shared")->origin == SyncClient::kServerOrigin);
    CHECK(client.get("shared~conflict-1")->body["operations"][0][2] == 30);
    // The local copy was pushed before the pull, so the server keeps it too.
    CHECK(server_store.get("pfc-1/shared"));
  }

  TEST_CASE("a client never pulls back its own uploads") {
    Datastore server_store;
    SyncServer server(server_store);
    LocalTransport transport(server);
    Datastore client;
    client.put(recipe_doc("mine"));
    SyncClient sync(client, transport, "pfc-1", KindFilter::all());
    SyncReport report = sync.sync();
    CHECK(report.pushed == 1);
    CHECK(report.pulled == 0);
    CHECK(client.document_count() == 1);
    // Another peer's upload does come down under the all filter.
    Datastore other;
    other.put(recipe_doc("theirs"));
    SyncClient(other, transport, "pfc-2", KindFilter::all()).sync();
    CHECK(sync.sync().pulled == 1);
    CHECK(client.get("pfc-2/theirs"));
    CHECK(sync.sync().pulled == 0);
  }

  TEST_CASE("server rejects malformed requests") {
    Datastore store;
    SyncServer server(store);
    CHECK(server.handle(versioned("POST", "/replicate/push", "{")).status == 400);
    CHECK(server.handle(versioned("POST", "/replicate/push", R"({"peer":"a/b","docs":[],"last_seq":0,"count":0,"checksum":0})"))
              .status == 400);
    WireRequest bad_since = versioned("GET", "/replicate/changes");
    bad_since.query["since"] = "-3";
    CHECK(server.handle(bad_since).status == 400);
    bad_since.query["since"] = "0";
    bad_since.query["filter"] = "telemetry";
    CHECK(server.handle(bad_since).status == 400);
    CHECK(server.handle(versioned("GET", "/replicate/nowhere")).status == 404);
    auto health = server.handle({"GET", "/health", {}, {}, {}});
    CHECK(health.status == 200);
    CHECK(Json::parse(health.body)["protocol"] == 1);
    CHECK_FALSE(valid_peer(""));
    CHECK_FALSE(valid_peer("server"));
    CHECK(valid_peer("pfc-1"));
  }
}
