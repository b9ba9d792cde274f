import { CurationApi } from "./api.js";
import {
  DashboardController,
  GenerationController,
  QueueController,
  ReviewController,
} from "./controllers.js";
import { renderDashboard, renderQueue, renderReview } from "./render.js";

const api = new CurationApi("");
const queue = new QueueController(api);
const review = new ReviewController(api);
const dashboard = new DashboardController(api);
const generation = new GenerationController(api);

const queuePane = document.getElementById("queue") as HTMLElement;
const reviewPane = document.getElementById("review") as HTMLElement;
const dashboardPane = document.getElementById("dashboard") as HTMLElement;
const reviewerInput = document.getElementById("reviewer") as HTMLInputElement;

reviewerInput.addEventListener("change", () => {
  review.reviewer = reviewerInput.value.trim() || "reviewer";
});

function redrawQueueAndStats(): void {
  void queue.refresh().then(() => renderQueue(queuePane, queue, openItem));
  void dashboard.refresh().then(() =>
    renderDashboard(dashboardPane, dashboard, generation, redrawQueueAndStats),
  );
}

function openItem(id: string): void {
  void review.load(id).then(() => renderReview(reviewPane, review, redrawQueueAndStats));
}

redrawQueueAndStats();
renderReview(reviewPane, review, redrawQueueAndStats);
setInterval(() => {
  void dashboard.refresh().then(() =>
    renderDashboard(dashboardPane, dashboard, generation, redrawQueueAndStats),
  );
}, 5000);
