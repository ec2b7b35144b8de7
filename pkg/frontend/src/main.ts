import { ApiClient } from "./api.js";
import { EditStudio } from "./ui.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");
new EditStudio(root, new ApiClient(""));
